//! The norm-deflation construction: a family of transported velocity bumps on
//! a sphere of radius `N₂`, the damping exponent they induce on a small core
//! profile, the composite approximate solution, its error term and the
//! deflation experiment.

mod beta;
mod error_term;
#[cfg(test)]
mod tests;

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::collision::{Angular, CollisionKernel};
use crate::error::{Error, Result};
use crate::field::{cutoff_profile, smooth_cutoff, AnalyticField, PhaseField, SamplePatch, SamplePlan, SupportBox};
use crate::norms::{sobolev_norm, z_norm, NormSpec};
use crate::quad::composite_legendre;

pub use beta::BetaEngine;
pub use error_term::{
    assemble_f_err, check_cover, velocity_ops, error_terms_from_parts, f_err_time_derivative_form, sample, ErrorTerms,
};

fn abs_cos() -> Angular {
    Angular::AbsCos
}

/// Scales and exponents of the construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeflationParams {
    pub d: usize,
    pub gamma: f64,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "N1")]
    pub n1: f64,
    #[serde(rename = "N2")]
    pub n2: f64,
    pub s0: f64,
    pub s: f64,
    pub r0: f64,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "T_star")]
    pub t_star: f64,
    pub j_schedule: usize,
    #[serde(default = "abs_cos")]
    pub angular: Angular,
}

impl Default for DeflationParams {
    fn default() -> Self {
        DeflationConfig::default().resolve()
    }
}

/// Sphere-point count: for `d = 2` the most uniform angles whose velocity
/// bumps stay pairwise disjoint (angular half-width `atan(2.5/(M N₂))`), about
/// `1.26·M N₂`; `(M N₂)²` for `d = 3`.
pub fn densest_disjoint(d: usize, m: f64, n2: f64) -> usize {
    if d == 2 {
        (PI / (2.5 / (m * n2)).atan()).floor() as usize
    } else {
        (m * n2).powf(d as f64 - 1.0).round() as usize
    }
}

/// Partial parameter set; absent scales follow `N₂ = 2M`, `N₁ = 8M`,
/// `J` from [`densest_disjoint`], `T* = -0.2·M^{s-(d-1)/2}` and `r₀ = max(0, s₀+γ)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeflationConfig {
    pub d: Option<usize>,
    pub gamma: Option<f64>,
    #[serde(rename = "M")]
    pub m: Option<f64>,
    #[serde(rename = "N1")]
    pub n1: Option<f64>,
    #[serde(rename = "N2")]
    pub n2: Option<f64>,
    pub s0: Option<f64>,
    pub s: Option<f64>,
    pub r0: Option<f64>,
    #[serde(rename = "J")]
    pub j: Option<usize>,
    #[serde(rename = "T_star")]
    pub t_star: Option<f64>,
    pub j_schedule: Option<usize>,
    pub angular: Option<Angular>,
}

impl DeflationConfig {
    pub fn resolve(&self) -> DeflationParams {
        let d = self.d.unwrap_or(2);
        let gamma = self.gamma.unwrap_or(-0.5);
        let m = self.m.unwrap_or(4.0);
        let n2 = self.n2.unwrap_or(2.0 * m);
        let n1 = self.n1.unwrap_or(8.0 * m);
        let s0 = self.s0.unwrap_or(0.25);
        let s = self.s.unwrap_or(0.45);
        let half = (d as f64 - 1.0) / 2.0;
        DeflationParams {
            d,
            gamma,
            m,
            n1,
            n2,
            s0,
            s,
            r0: self.r0.unwrap_or((s0 + gamma).max(0.0)),
            j: self.j.unwrap_or_else(|| densest_disjoint(d, m, n2)),
            t_star: self.t_star.unwrap_or(-0.2 * m.powf(s - half)),
            j_schedule: self.j_schedule.unwrap_or(32),
            angular: self.angular.unwrap_or(Angular::AbsCos),
        }
    }
}

impl DeflationParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.d != 2 && self.d != 3 {
            return Err(Error::Unsupported(format!("dimension {}", self.d)));
        }
        CollisionKernel::power_law(self.gamma, self.angular).validate(self.d)?;
        if !(self.n1 >= self.n2 && self.n2 >= self.m && self.m >= 2.0) {
            return bad(format!(
                "need N1 >= N2 >= M >= 2, got N1 = {}, N2 = {}, M = {}",
                self.n1, self.n2, self.m
            ));
        }
        let r0 = (self.s0 + self.gamma).max(0.0);
        if (self.r0 - r0).abs() > 1e-12 {
            return bad(format!("r0 must equal max(0, s0 + gamma) = {r0}, got {}", self.r0));
        }
        let top = (self.d as f64 - 1.0) / 2.0;
        if !(self.s0 >= 0.0 && self.s0 < self.s && self.s < top) {
            return bad(format!(
                "need 0 <= s0 < s < {top}, got s0 = {}, s = {}",
                self.s0, self.s
            ));
        }
        if !(self.t_star < 0.0 && self.t_star >= -0.25) {
            return bad(format!("need -1/4 <= T_star < 0, got {}", self.t_star));
        }
        let nominal = self.nominal_j();
        let j = self.j as f64;
        if self.j < 4 || j < 0.5 * nominal || j > 2.0 * nominal {
            return bad(format!(
                "J = {} must be >= 4 and within a factor 2 of (M N2)^(d-1) = {nominal}",
                self.j
            ));
        }
        if self.j_schedule < 2 {
            return bad(format!("j_schedule must be >= 2, got {}", self.j_schedule));
        }
        Ok(())
    }

    pub fn nominal_j(&self) -> f64 {
        (self.m * self.n2).powf(self.d as f64 - 1.0)
    }

    /// Amplitude of the bump family.
    pub fn bump_amplitude(&self) -> f64 {
        self.m.powf((self.d as f64 - 1.0) / 2.0 - self.s) / self.n2.powf(self.d as f64 + self.gamma)
    }

    /// Amplitude of the core profile before damping.
    pub fn core_amplitude(&self) -> f64 {
        self.m.powf(self.d as f64 / 2.0 - self.s) * self.n1.powf(self.d as f64 / 2.0)
    }

    /// The natural damping rate `M^{(d-1)/2-s}`.
    pub fn damping_scale(&self) -> f64 {
        self.m.powf((self.d as f64 - 1.0) / 2.0 - self.s)
    }
}

/// Unit vectors on `S^{d-1}` with orthonormal frames.
#[derive(Clone, Debug)]
pub struct BumpFamily {
    pub d: usize,
    pub points: Vec<Vec<f64>>,
    /// Row-major `d×d`; row 0 is the point, the others span its orthogonal complement.
    pub frames: Vec<Vec<f64>>,
    pub min_angle: f64,
}

impl BumpFamily {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `e_j · x`.
    pub fn along(&self, j: usize, x: &[f64]) -> f64 {
        dot(&self.points[j], x)
    }

    /// Coordinates of `P⊥_{e_j} x` in the frame of `e_j`.
    pub fn perp(&self, j: usize, x: &[f64]) -> [f64; 2] {
        let d = self.d;
        let f = &self.frames[j];
        let mut out = [0.0; 2];
        for (k, slot) in out.iter_mut().enumerate().take(d - 1) {
            *slot = dot(&f[(k + 1) * d..(k + 2) * d], x);
        }
        out
    }

    /// Global vector `a e_j + Σ p_k f_k`.
    pub fn compose(&self, j: usize, a: f64, p: &[f64]) -> Vec<f64> {
        let d = self.d;
        let f = &self.frames[j];
        (0..d)
            .map(|i| a * f[i] + p.iter().enumerate().map(|(k, pk)| pk * f[(k + 1) * d + i]).sum::<f64>())
            .collect()
    }

    /// `min_angle · M · N₂`, the constant in the spacing contract.
    pub fn spacing_constant(&self, p: &DeflationParams) -> f64 {
        self.min_angle * p.m * p.n2
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn frame_of(e: &[f64]) -> Vec<f64> {
    match e.len() {
        2 => vec![e[0], e[1], -e[1], e[0]],
        _ => {
            // Gram–Schmidt against the least aligned axis.
            let k = (0..3).min_by(|&a, &b| e[a].abs().total_cmp(&e[b].abs())).unwrap();
            let mut f1 = [0.0; 3];
            f1[k] = 1.0;
            let c = dot(&f1, e);
            for i in 0..3 {
                f1[i] -= c * e[i];
            }
            let n = norm(&f1);
            f1.iter_mut().for_each(|x| *x /= n);
            let f2 = [e[1] * f1[2] - e[2] * f1[1], e[2] * f1[0] - e[0] * f1[2], e[0] * f1[1] - e[1] * f1[0]];
            vec![e[0], e[1], e[2], f1[0], f1[1], f1[2], f2[0], f2[1], f2[2]]
        }
    }
}

/// Uniform angles for `d = 2`, a Fibonacci lattice for `d = 3`.
pub fn sphere_points(d: usize, j: usize) -> Result<BumpFamily> {
    if j < 4 {
        return Err(Error::Parameter(format!("need at least 4 sphere points, got {j}")));
    }
    let points: Vec<Vec<f64>> = match d {
        2 => (0..j)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / j as f64;
                vec![th.cos(), th.sin()]
            })
            .collect(),
        3 => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..j)
                .map(|k| {
                    let z = 1.0 - (2.0 * k as f64 + 1.0) / j as f64;
                    let r = (1.0 - z * z).sqrt();
                    let phi = golden * k as f64;
                    vec![r * phi.cos(), r * phi.sin(), z]
                })
                .collect()
        }
        _ => return Err(Error::Unsupported(format!("dimension {d}"))),
    };
    let min_angle = if d == 2 {
        2.0 * PI / j as f64
    } else {
        let mut best = f64::INFINITY;
        for a in 0..j {
            for b in a + 1..j {
                best = best.min(dot(&points[a], &points[b]).clamp(-1.0, 1.0).acos());
            }
        }
        best
    };
    let frames = points.iter().map(|e| frame_of(e)).collect();
    Ok(BumpFamily { d, points, frames, min_angle })
}

/// Shared geometry of the bump family.
#[derive(Clone)]
pub(crate) struct Bumps {
    pub d: usize,
    pub m: f64,
    pub n2: f64,
    pub amplitude: f64,
    pub fam: Arc<BumpFamily>,
    /// Largest angle between `v` and `e_j` on the support of `I_j`.
    half_angle: f64,
}

impl Bumps {
    pub fn new(p: &DeflationParams, fam: &BumpFamily) -> Result<Bumps> {
        if fam.d != p.d {
            return Err(Error::Parameter(format!(
                "family in dimension {} for d = {}",
                fam.d, p.d
            )));
        }
        let half_angle = (2.0 / (p.m * 0.8 * p.n2)).min(1.0).asin();
        Ok(Bumps {
            d: p.d,
            m: p.m,
            n2: p.n2,
            amplitude: p.bump_amplitude(),
            fam: Arc::new(fam.clone()),
            half_angle,
        })
    }

    /// Velocity profile `I_j(v)`.
    pub fn velocity_bump(&self, j: usize, v: &[f64]) -> f64 {
        let a = self.fam.along(j, v);
        let along = cutoff_profile(10.0 * (a - self.n2).abs() / self.n2);
        if along == 0.0 {
            return 0.0;
        }
        let p = self.fam.perp(j, v);
        along * cutoff_profile(self.m * (p[0] * p[0] + p[1] * p[1]).sqrt())
    }

    /// Spatial profile `K_j(x)`.
    pub fn spatial_bump(&self, j: usize, x: &[f64]) -> f64 {
        let q = self.fam.perp(j, x);
        let perp = cutoff_profile(self.m * (q[0] * q[0] + q[1] * q[1]).sqrt());
        if perp == 0.0 {
            return 0.0;
        }
        perp * cutoff_profile(self.fam.along(j, x).abs() / self.n2)
    }

    /// Indices `j` whose velocity support may contain `v`.
    pub fn candidates(&self, v: &[f64]) -> Vec<usize> {
        let r = norm(v);
        if r < 0.8 * self.n2 * 0.999 || r > 1.3 * self.n2 {
            return Vec::new();
        }
        let j = self.fam.len();
        if self.d == 2 {
            let step = 2.0 * PI / j as f64;
            let reach = (self.half_angle / step).ceil() as isize + 1;
            let center = (v[1].atan2(v[0]) / step).round() as isize;
            let mut out: Vec<usize> =
                (center - reach..=center + reach).map(|k| k.rem_euclid(j as isize) as usize).collect();
            out.sort_unstable();
            out.dedup();
            out
        } else {
            let c = (self.half_angle * 1.01).min(PI).cos();
            (0..j).filter(|&k| self.fam.along(k, v) >= c * r).collect()
        }
    }

    /// `f_b(t, x, v)`.
    pub fn eval(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        let mut acc = 0.0;
        let mut shifted = [0.0; 3];
        for i in 0..self.d {
            shifted[i] = x[i] - v[i] * t;
        }
        for j in self.candidates(v) {
            let iv = self.velocity_bump(j, v);
            if iv != 0.0 {
                acc += iv * self.spatial_bump(j, &shifted[..self.d]);
            }
        }
        self.amplitude * acc
    }

    /// `Σ_k I_k(v)`.
    pub fn velocity_cover(&self, v: &[f64]) -> f64 {
        self.candidates(v).into_iter().map(|k| self.velocity_bump(k, v)).sum()
    }

    pub fn support(&self, t: f64) -> SupportBox {
        let x_half = 2.0 * self.n2 + 2.0 / self.m + 1.3 * self.n2 * t.abs();
        SupportBox::symmetric(self.d, x_half, 1.3 * self.n2)
    }
}

/// Composite rule over `[0.8, 1.2]·N₂` and `[-2, 2]/M` with breaks at the
/// transition points of the profiles.
pub(crate) fn along_rule(n2: f64, per_piece: usize) -> (Vec<f64>, Vec<f64>) {
    composite_legendre(&[0.8 * n2, 0.9 * n2, 1.1 * n2, 1.2 * n2], per_piece)
}

pub(crate) fn perp_rule(m: f64, per_piece: usize) -> (Vec<f64>, Vec<f64>) {
    composite_legendre(&[-2.0 / m, -1.0 / m, 1.0 / m, 2.0 / m], per_piece)
}

/// Nodes per composite piece in the sampling plans.
const PLAN_PIECE: usize = 6;
/// Lattice points per unit of the along length `N₂` and of the width `1/M`.
const LATTICE_DENSITY: f64 = 16.0;
/// x-lattice of the core profile: points per axis and box half-width in units of `1/M`.
const CORE_SPACING: f64 = 5.0 / 64.0;
/// Zero margin around each x-support: the Bessel weight `⟨k⟩^{2s}` couples
/// points at unit distance with `e^{-|x|}` decay, so periodic images must sit
/// a few units away (3 units leaves a relative error near 1e-5).
const PERIODIC_MARGIN: f64 = 3.0;

fn bump_plan(b: &Bumps, t: f64) -> SamplePlan {
    let d = b.d;
    let (a_nodes, a_w) = along_rule(b.n2, PLAN_PIECE);
    let (p_nodes, p_w) = perp_rule(b.m, PLAN_PIECE);
    let local: Vec<(Vec<f64>, f64)> = if d == 2 {
        a_nodes
            .iter()
            .zip(&a_w)
            .flat_map(|(&a, &wa)| p_nodes.iter().zip(&p_w).map(move |(&p, &wp)| (vec![a, p], wa * wp)))
            .collect()
    } else {
        let mut out = Vec::new();
        for (&a, &wa) in a_nodes.iter().zip(&a_w) {
            for (&p1, &w1) in p_nodes.iter().zip(&p_w) {
                for (&p2, &w2) in p_nodes.iter().zip(&p_w) {
                    out.push((vec![a, p1, p2], wa * w1 * w2));
                }
            }
        }
        out
    };
    // d = 2 uses the rotation symmetry of uniform angles: one patch stands for all J.
    let sectors: Vec<usize> = if d == 2 { vec![0] } else { (0..b.fam.len()).collect() };
    let mult = if d == 2 { b.fam.len() as f64 } else { 1.0 };
    let patches = sectors
        .into_iter()
        .map(|j| {
            let mut v_nodes = Vec::new();
            let mut v_weights = Vec::new();
            for (loc, w) in &local {
                let v = b.fam.compose(j, loc[0], &loc[1..]);
                let own = b.velocity_bump(j, &v);
                if own == 0.0 {
                    continue;
                }
                v_weights.push(w * own / b.velocity_cover(&v));
                v_nodes.push(v);
            }
            // Local x-box covering every tube that contributes at these velocities.
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            let frame = &b.fam.frames[j];
            for v in &v_nodes {
                for k in b.candidates(v) {
                    if b.velocity_bump(k, v) == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        let row = &frame[c * d..(c + 1) * d];
                        let shift = dot(row, v) * t;
                        let ek = &b.fam.points[k];
                        let along = dot(row, ek).abs();
                        let across = (1.0 - along * along).max(0.0).sqrt();
                        let reach = 2.0 * b.n2 * along + 2.0 / b.m * across;
                        lo[c] = lo[c].min(shift - reach);
                        hi[c] = hi[c].max(shift + reach);
                    }
                }
            }
            let mut n_x = vec![0; d];
            for c in 0..d {
                let step = if c == 0 { b.n2 } else { 1.0 / b.m } / LATTICE_DENSITY;
                let pad = 2.0 * step + PERIODIC_MARGIN;
                lo[c] -= pad;
                hi[c] += pad;
                n_x[c] = ((hi[c] - lo[c]) / step).ceil() as usize;
            }
            SamplePatch {
                frame: if d == 2 { None } else { Some(frame.clone()) },
                x_lo: lo,
                x_hi: hi,
                n_x,
                v_nodes,
                v_weights,
                multiplicity: mult,
            }
        })
        .collect::<Vec<_>>();
    SamplePlan { patches }
}

fn core_plan(p: &DeflationParams) -> SamplePlan {
    let d = p.d;
    let (nodes, weights) = composite_legendre(&[-2.0 / p.n1, -1.0 / p.n1, 1.0 / p.n1, 2.0 / p.n1], PLAN_PIECE);
    let n = nodes.len();
    let mut v_nodes = Vec::new();
    let mut v_weights = Vec::new();
    for flat in 0..n.pow(d as u32) {
        let idx = crate::field::unflatten(flat, n, d);
        let v: Vec<f64> = idx.iter().map(|&i| nodes[i]).collect();
        if smooth_cutoff(&v.iter().map(|c| c * p.n1).collect::<Vec<_>>()) == 0.0 {
            continue;
        }
        v_nodes.push(v);
        v_weights.push(idx.iter().map(|&i| weights[i]).product());
    }
    let step = CORE_SPACING / p.m;
    let n_x = ((2.0 * (2.0 / p.m + PERIODIC_MARGIN) / step).ceil() as usize).next_multiple_of(2);
    let half = n_x as f64 * step / 2.0;
    SamplePlan {
        patches: vec![SamplePatch {
            frame: None,
            x_lo: vec![-half; d],
            x_hi: vec![half; d],
            n_x: vec![n_x; d],
            v_nodes,
            v_weights,
            multiplicity: 1.0,
        }],
    }
}

/// The bump family `f_b(t)`, an exact free-transport solution.
pub fn build_fb(p: &DeflationParams, fam: &BumpFamily, t: f64) -> Result<PhaseField> {
    p.validate()?;
    if t > 0.0 {
        return Err(Error::Parameter(format!("need t <= 0, got {t}")));
    }
    let b = Bumps::new(p, fam)?;
    let plan = bump_plan(&b, t);
    let support = b.support(t);
    Ok(PhaseField::Analytic(AnalyticField::new(support, move |x, v| b.eval(t, x, v)).with_plan(plan)))
}

fn check_window(p: &DeflationParams, t: f64) -> Result<()> {
    if !(t >= p.t_star && t <= 0.0) {
        return Err(Error::Parameter(format!("need T_star <= t <= 0, got t = {t}")));
    }
    Ok(())
}

/// The damped core `f_r(t) = A·exp[-β]·χ(Mx)χ(N₁v)`.
pub fn build_fr(p: &DeflationParams, engine: &Arc<BetaEngine>, t: f64) -> Result<PhaseField> {
    check_window(p, t)?;
    let (m, n1, amp, d) = (p.m, p.n1, p.core_amplitude(), p.d);
    let eng = Arc::clone(engine);
    let support = SupportBox::symmetric(d, 2.0 / m, 2.0 / n1);
    let field = AnalyticField::new(support, move |x, v| {
        let mut sx = [0.0; 3];
        let mut sv = [0.0; 3];
        for i in 0..d {
            sx[i] = m * x[i];
            sv[i] = n1 * v[i];
        }
        let c = smooth_cutoff(&sx[..d]) * smooth_cutoff(&sv[..d]);
        if c == 0.0 {
            return 0.0;
        }
        amp * c * (-eng.beta(t, x, v)).exp()
    });
    Ok(PhaseField::Analytic(field.with_plan(core_plan(p))))
}

/// `f_a = f_r + f_b` with the union of both sampling plans.
pub fn build_fa(p: &DeflationParams, engine: &Arc<BetaEngine>, t: f64) -> Result<PhaseField> {
    check_window(p, t)?;
    // Core velocities reach |v| ≤ 2/N₁; the bumps start at |v| ≥ 0.8·N₂.
    if 2.0 / p.n1 >= 0.8 * p.n2 {
        return Err(Error::Parameter("velocity supports of core and bumps overlap".into()));
    }
    let (fr, fb) = (build_fr(p, engine, t)?, build_fb(p, engine.family(), t)?);
    let (PhaseField::Analytic(fr), PhaseField::Analytic(fb)) = (fr, fb) else {
        unreachable!("both parts are analytic")
    };
    let mut plan = (*fr.plan.clone().unwrap()).clone();
    plan.patches.extend(fb.plan.as_ref().unwrap().patches.iter().cloned());
    let support = fr.support.union(&fb.support);
    let field = AnalyticField::new(support, move |x, v| fr.eval(x, v) + fb.eval(x, v));
    Ok(PhaseField::Analytic(field.with_plan(plan)))
}

/// Norm table of the deflation experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeflationReport {
    pub params: DeflationParams,
    pub norm: NormSpec,
    pub times: Vec<f64>,
    pub norm_fa: Vec<f64>,
    pub norm_fr: Vec<f64>,
    pub norm_fb: Vec<f64>,
    /// `‖f_a(T*)‖ / ‖f_a(0)‖`.
    pub ratio: f64,
}

impl DeflationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,norm_fa,norm_fr,norm_fb\n");
        for i in 0..self.times.len() {
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e}\n",
                self.times[i], self.norm_fa[i], self.norm_fr[i], self.norm_fb[i]
            ));
        }
        out
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({ "ratio": self.ratio, "params": self.params })
    }
}

fn measure(f: &PhaseField, norm: &NormSpec) -> Result<f64> {
    match *norm {
        NormSpec::Sobolev { s, r } => sobolev_norm(f, s, r),
        NormSpec::Znorm { m, n2, gamma, r0 } => z_norm(f, m, n2, gamma, r0),
        NormSpec::Xsrb { .. } => Err(Error::Unsupported("space-time norm of a single time slice".into())),
    }
}

/// Norms of `f_a`, `f_r`, `f_b` on `n_times` uniform times in `[T*, 0]`.
pub fn deflation_experiment(
    p: &DeflationParams,
    fam: &BumpFamily,
    norm: &NormSpec,
    n_times: usize,
) -> Result<DeflationReport> {
    p.validate()?;
    norm.validate()?;
    if n_times < 2 {
        return Err(Error::Parameter(format!("need at least 2 times, got {n_times}")));
    }
    let engine = Arc::new(BetaEngine::new(p, fam)?);
    let times: Vec<f64> =
        (0..n_times).map(|k| p.t_star * (1.0 - k as f64 / (n_times - 1) as f64)).collect();
    let (mut norm_fa, mut norm_fr, mut norm_fb) = (Vec::new(), Vec::new(), Vec::new());
    for &t in &times {
        let fr = measure(&build_fr(p, &engine, t)?, norm)?;
        let fb = measure(&build_fb(p, fam, t)?, norm)?;
        // Disjoint velocity supports: squared norms add for L²-type norms.
        let fa = match norm {
            NormSpec::Sobolev { .. } => (fr * fr + fb * fb).sqrt(),
            _ => measure(&build_fa(p, &engine, t)?, norm)?,
        };
        norm_fa.push(fa);
        norm_fr.push(fr);
        norm_fb.push(fb);
        engine.clear_cache();
    }
    let ratio = norm_fa[0] / norm_fa[n_times - 1];
    Ok(DeflationReport { params: p.clone(), norm: norm.clone(), times, norm_fa, norm_fr, norm_fb, ratio })
}

