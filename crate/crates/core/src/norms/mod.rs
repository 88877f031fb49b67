//! Weighted Sobolev norms, Littlewood–Paley projectors, the six-term Z-norm,
//! the restriction norm on trajectories and randomized inequality checks.

mod inequality;

pub use inequality::{
    check_inequality, default_setup, inequality_sides, trial_inputs, Bump, FieldFamily,
    InequalityKind, InequalityReport, InequalitySetup, Mixture,
};

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{
    cutoff_profile, fft_axes, fft_axis, frequency, fourier_multiplier, Axis,
    PhaseField,
};
use crate::solver::Trajectory;

/// Which norm a report or experiment uses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormSpec {
    Sobolev { s: f64, r: f64 },
    Znorm { m: f64, n2: f64, gamma: f64, r0: f64 },
    Xsrb { s: f64, r: f64, b: f64 },
}

impl NormSpec {
    pub fn validate(&self) -> Result<()> {
        if let NormSpec::Xsrb { b, .. } = self {
            if !(*b > 0.5 && *b < 1.0) {
                return Err(Error::Parameter(format!("b must lie in (1/2, 1), got {b}")));
            }
        }
        Ok(())
    }
}

/// `⟨y⟩ = (1 + |y|²)^{1/2}`.
pub fn japanese(y: &[f64]) -> f64 {
    (1.0 + y.iter().map(|c| c * c).sum::<f64>()).sqrt()
}

/// Per-velocity x-statistics of one column `x ↦ f(x, v)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ColumnStats {
    /// `‖f‖²_{L²_x}`
    pub l2_sq: f64,
    /// `‖⟨∇⟩^s f‖²_{L²_x}`
    pub sobolev_sq: f64,
    /// `‖∇f‖²_{L²_x}`
    pub grad_l2_sq: f64,
    pub sup: f64,
    pub grad_sup: f64,
}

#[derive(Clone, Copy)]
struct Needs {
    s: f64,
    grad_sup: bool,
}

fn column_stats(values: &[f64], shape: &[usize], periods: &[f64], cell: f64, needs: Needs) -> ColumnStats {
    let sup = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if sup == 0.0 {
        return ColumnStats::default();
    }
    let d = shape.len();
    let n: usize = shape.iter().product();
    let mut spec: Vec<Complex64> = values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let axes: Vec<usize> = (0..d).collect();
    fft_axes(&mut spec, shape, &axes, false);
    let mut out = ColumnStats { sup, ..Default::default() };
    let mut k = vec![0.0; d];
    let mut idx = vec![0usize; d];
    for (flat, c) in spec.iter().enumerate() {
        let mut rem = flat;
        for a in (0..d).rev() {
            idx[a] = rem % shape[a];
            rem /= shape[a];
            k[a] = frequency(idx[a], shape[a], periods[a]);
        }
        let k2: f64 = k.iter().map(|x| x * x).sum();
        let p = c.norm_sqr();
        out.l2_sq += p;
        out.grad_l2_sq += k2 * p;
        out.sobolev_sq += (1.0 + k2).powf(needs.s) * p;
    }
    let scale = cell / n as f64;
    out.l2_sq *= scale;
    out.grad_l2_sq *= scale;
    out.sobolev_sq *= scale;
    if needs.grad_sup {
        let mut planner = FftPlanner::new();
        let mut mag = vec![0.0; n];
        for a in 0..d {
            let stride: usize = shape[a + 1..].iter().product();
            let mut g: Vec<Complex64> = spec
                .iter()
                .enumerate()
                .map(|(flat, c)| {
                    let i = (flat / stride) % shape[a];
                    if 2 * i == shape[a] {
                        Complex64::new(0.0, 0.0)
                    } else {
                        c * Complex64::new(0.0, frequency(i, shape[a], periods[a]))
                    }
                })
                .collect();
            for b in 0..d {
                fft_axis(&mut g, shape, b, true, &mut planner);
            }
            for (m, c) in mag.iter_mut().zip(&g) {
                *m += c.re * c.re;
            }
        }
        out.grad_sup = mag.iter().fold(0.0f64, |m, x| m.max(*x)).sqrt();
    }
    out
}

/// One velocity node: its coordinates, quadrature weight and x-statistics.
#[derive(Clone, Debug)]
pub struct VelocityColumn {
    pub v: Vec<f64>,
    pub weight: f64,
    pub stats: ColumnStats,
}

fn columns(f: &PhaseField, needs: Needs) -> Result<Vec<VelocityColumn>> {
    match f {
        PhaseField::Dense(f) => {
            let g = &f.grid;
            let shape = vec![g.n_x; g.d];
            let periods = vec![2.0 * g.l_x; g.d];
            let cell = g.h_x().powi(g.d as i32);
            let weight = g.h_v().powi(g.d as i32);
            let nv = g.v_len();
            Ok((0..nv)
                .into_par_iter()
                .map(|iv| {
                    let col: Vec<f64> = (0..g.x_len()).map(|ix| f.values[ix * nv + iv]).collect();
                    VelocityColumn {
                        v: g.v_point(iv),
                        weight,
                        stats: column_stats(&col, &shape, &periods, cell, needs),
                    }
                })
                .collect())
        }
        PhaseField::Analytic(a) => {
            let plan = a.plan.as_ref().ok_or_else(|| {
                Error::Representation("analytic field has no sampling plan".into())
            })?;
            let mut out = Vec::new();
            for patch in &plan.patches {
                let periods: Vec<f64> =
                    (0..patch.n_x.len()).map(|k| patch.x_hi[k] - patch.x_lo[k]).collect();
                let cell = patch.cell_volume();
                let part: Vec<VelocityColumn> = patch
                    .v_nodes
                    .par_iter()
                    .zip(&patch.v_weights)
                    .map(|(v, &w)| {
                        let col = a.sample_patch(patch, v);
                        VelocityColumn {
                            v: v.clone(),
                            weight: w * patch.multiplicity,
                            stats: column_stats(&col, &patch.n_x, &periods, cell, needs),
                        }
                    })
                    .collect();
                out.extend(part);
            }
            Ok(out)
        }
    }
}

/// Per-velocity statistics with the given Sobolev exponent.
pub fn velocity_columns(f: &PhaseField, s: f64, with_grad_sup: bool) -> Result<Vec<VelocityColumn>> {
    columns(f, Needs { s, grad_sup: with_grad_sup })
}

/// `‖⟨∇_x⟩^s ⟨v⟩^r f‖_{L²_{x,v}}`.
pub fn sobolev_norm(f: &PhaseField, s: f64, r: f64) -> Result<f64> {
    let cols = columns(f, Needs { s, grad_sup: false })?;
    Ok(cols
        .iter()
        .map(|c| c.weight * japanese(&c.v).powf(2.0 * r) * c.stats.sobolev_sq)
        .sum::<f64>()
        .sqrt())
}

/// Frequency axis group for a projector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectAxis {
    X,
    V,
}

/// Littlewood–Paley piece at dyadic scale `n`: multiplier `χ(k/n) − χ(2k/n)`,
/// and `χ(k)` for `n = 1`.
pub fn lp_project(f: &PhaseField, n: u64, axis: ProjectAxis) -> Result<PhaseField> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Parameter(format!("scale must be a power of two, got {n}")));
    }
    let dense = f.as_dense()?;
    let h = match axis {
        ProjectAxis::X => dense.grid.h_x(),
        ProjectAxis::V => dense.grid.h_v(),
    };
    let nyquist = std::f64::consts::PI / h;
    let nf = n as f64;
    if nf > nyquist {
        return Err(Error::Resolution(format!("scale {n} exceeds the Nyquist frequency {nyquist:.3}")));
    }
    let ax = match axis {
        ProjectAxis::X => Axis::X,
        ProjectAxis::V => Axis::V,
    };
    fourier_multiplier(f, &[ax], |k| {
        let r = k.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n == 1 {
            cutoff_profile(r)
        } else {
            cutoff_profile(r / nf) - cutoff_profile(2.0 * r / nf)
        }
    })
}

/// Weights of the six-term Z-norm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZWeights {
    pub m: f64,
    pub n2: f64,
    pub gamma: f64,
    pub r0: f64,
}

/// The six summands of the Z-norm, in the order
/// gradient L², L², L¹L^∞, L^{5/3}L^∞, gradient L¹L^∞, gradient L^{5/3}L^∞.
pub fn z_terms(f: &PhaseField, w: ZWeights) -> Result<[f64; 6]> {
    let d = match f {
        PhaseField::Dense(f) => f.grid.d,
        PhaseField::Analytic(a) => a.support.x_lo.len(),
    } as f64;
    let cols = columns(f, Needs { s: 0.0, grad_sup: true })?;
    z_terms_from_columns(&cols, d, w)
}

pub fn z_terms_from_columns(cols: &[VelocityColumn], d: f64, w: ZWeights) -> Result<[f64; 6]> {
    let mut acc = [0.0; 6];
    for c in cols {
        let vw = japanese(&c.v).powf(2.0 * w.r0);
        acc[0] += c.weight * vw * c.stats.grad_l2_sq;
        acc[1] += c.weight * vw * c.stats.l2_sq;
        acc[2] += c.weight * c.stats.sup;
        acc[3] += c.weight * c.stats.sup.powf(5.0 / 3.0);
        acc[4] += c.weight * c.stats.grad_sup;
        acc[5] += c.weight * c.stats.grad_sup.powf(5.0 / 3.0);
    }
    let (m, n2, g) = (w.m, w.n2, w.gamma);
    let high = n2.powf(2.0 * d / 5.0 + g);
    Ok([
        m.powf((d - 3.0) / 2.0) * acc[0].sqrt(),
        m.powf((d - 1.0) / 2.0) * acc[1].sqrt(),
        n2.powf(g) * acc[2],
        high * acc[3].powf(0.6),
        n2.powf(g) * acc[4] / m,
        high * acc[5].powf(0.6) / m,
    ])
}

pub fn z_norm(f: &PhaseField, m: f64, n2: f64, gamma: f64, r0: f64) -> Result<f64> {
    Ok(z_terms(f, ZWeights { m, n2, gamma, r0 })?.iter().sum())
}

/// Smooth time window: 1 within `plateau` of `center`, 0 beyond `reach`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Taper {
    pub center: f64,
    pub plateau: f64,
    pub reach: f64,
}

impl Taper {
    /// Window covering a trajectory, flat over its middle half.
    pub fn covering(traj: &Trajectory) -> Taper {
        let (a, b) = (traj.times[0], *traj.times.last().unwrap());
        let half = 0.5 * (b - a);
        Taper { center: 0.5 * (a + b), plateau: 0.5 * half, reach: half }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let u = (t - self.center).abs();
        if u <= self.plateau {
            return 1.0;
        }
        if self.reach <= self.plateau {
            return 0.0;
        }
        cutoff_profile(1.0 + (u - self.plateau) / (self.reach - self.plateau))
    }
}

/// `‖⟨τ+η·v⟩^b ⟨η⟩^s ⟨v⟩^r F_{t,x}[taper·f]‖_{L²_{τ,η,v}}`.
pub fn xsrb_norm(traj: &Trajectory, s: f64, r: f64, b: f64, window: &Taper) -> Result<f64> {
    let k = traj.len();
    if k < 8 {
        return Err(Error::Shape(format!("need at least 8 time samples, got {k}")));
    }
    let g = &traj.grid;
    let d = g.d;
    let nx = g.x_len();
    let nv = g.v_len();
    let dt = traj.dt();
    let tapers: Vec<f64> = traj.times.iter().map(|&t| window.eval(t)).collect();
    let mut shape = vec![k];
    shape.extend(std::iter::repeat(g.n_x).take(d));
    let mut periods = vec![k as f64 * dt];
    periods.extend(std::iter::repeat(2.0 * g.l_x).take(d));
    let axes: Vec<usize> = (0..=d).collect();
    let total: f64 = (0..nv)
        .into_par_iter()
        .map(|iv| {
            let mut data = Vec::with_capacity(k * nx);
            for (f, &w) in traj.fields.iter().zip(&tapers) {
                data.extend((0..nx).map(|ix| Complex64::new(w * f.values[ix * nv + iv], 0.0)));
            }
            if data.iter().all(|c| c.re == 0.0) {
                return 0.0;
            }
            fft_axes(&mut data, &shape, &axes, false);
            let v = g.v_point(iv);
            let mut acc = 0.0;
            let mut eta = vec![0.0; d];
            for (flat, c) in data.iter().enumerate() {
                let mut rem = flat;
                for a in (0..d).rev() {
                    eta[a] = frequency(rem % g.n_x, g.n_x, periods[a + 1]);
                    rem /= g.n_x;
                }
                let tau = frequency(rem, k, periods[0]);
                let ev: f64 = eta.iter().zip(&v).map(|(e, v)| e * v).sum();
                acc += (1.0 + (tau + ev).powi(2)).powf(b) * japanese(&eta).powf(2.0 * s) * c.norm_sqr();
            }
            acc * japanese(&v).powf(2.0 * r)
        })
        .sum();
    let cell = g.h_x().powi(d as i32) * g.h_v().powi(d as i32);
    Ok((total * dt * cell / (k * nx) as f64).sqrt())
}

/// Scaling-critical regularity `s_c` and the matched weight `r(s) = s + γ`.
pub fn critical_indices(d: usize, gamma: f64) -> Result<(f64, impl Fn(f64) -> f64)> {
    if d != 2 && d != 3 {
        return Err(Error::Unsupported(format!("dimension {d}")));
    }
    Ok(((d as f64 - 2.0) / 2.0, move |s: f64| s + gamma))
}
