//! Cutoff Boltzmann collision operator for soft potentials: kernel, sphere
//! rules, direct quadrature in `(u, ω)`, the Bobylev spectral forms and
//! conservation diagnostics.

use std::collections::HashMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::field::{fft_axes, DenseField, Grid, PhaseField, VelocityGrid};
use crate::quad::{gauss_legendre, lattice_origin_weight, radial_rule, sphere_area};

/// Angular factor `b(cos θ)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Angular {
    /// `b(c) = |c|`.
    AbsCos,
    /// `b(c) = 1`.
    Constant,
}

impl Angular {
    #[inline]
    pub fn eval(self, c: f64) -> f64 {
        match self {
            Angular::AbsCos => c.abs(),
            Angular::Constant => 1.0,
        }
    }

    /// `‖b‖_{L¹(S^{d-1})}`.
    pub fn l1_norm(self, d: usize) -> f64 {
        match self {
            // ∫|ω₁| dω = 2|S^{d-2}|/(d-1)
            Angular::AbsCos => {
                if d == 2 {
                    4.0
                } else {
                    2.0 * sphere_area(d - 1) / (d as f64 - 1.0)
                }
            }
            Angular::Constant => sphere_area(d),
        }
    }

    /// Smallest `C` with `b(c) ≤ C|c|`, if any.
    pub fn grad_constant(self) -> Option<f64> {
        match self {
            Angular::AbsCos => Some(1.0),
            Angular::Constant => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    PowerLaw,
    /// `|z|` for `|z| ≤ 1`, `|z|^{-1}` beyond; `d = 3` only.
    Composite,
}

fn default_true() -> bool {
    true
}

fn default_eps() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollisionKernel {
    pub gamma: f64,
    pub b: Angular,
    pub variant: Variant,
    #[serde(default = "default_eps")]
    pub cutoff_eps: f64,
    /// Adds the lattice weight at `u = v` that restores the excluded mass.
    #[serde(default = "default_true")]
    pub origin_correction: bool,
}

impl Default for CollisionKernel {
    fn default() -> Self {
        CollisionKernel {
            gamma: -0.5,
            b: Angular::AbsCos,
            variant: Variant::PowerLaw,
            cutoff_eps: 0.5,
            origin_correction: true,
        }
    }
}

impl CollisionKernel {
    pub fn power_law(gamma: f64, b: Angular) -> CollisionKernel {
        CollisionKernel { gamma, b, ..CollisionKernel::default() }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.cutoff_eps >= 0.0 && self.cutoff_eps.is_finite()) {
            return Err(Error::Parameter(format!("cutoff_eps must be >= 0, got {}", self.cutoff_eps)));
        }
        match self.variant {
            Variant::PowerLaw => {
                let lo = -(d as f64 - 1.0) / 2.0;
                if !(self.gamma >= lo && self.gamma <= 0.0) {
                    return Err(Error::Parameter(format!(
                        "gamma = {} violates -(d-1)/2 <= gamma <= 0 (here {lo} <= gamma <= 0)",
                        self.gamma
                    )));
                }
            }
            Variant::Composite => {
                if d != 3 {
                    return Err(Error::Parameter("composite kernel requires d = 3".into()));
                }
            }
        }
        Ok(())
    }

    /// Radial factor at relative speed `r > 0`.
    #[inline]
    pub fn radial(&self, r: f64) -> f64 {
        match self.variant {
            Variant::PowerLaw => {
                if self.gamma == 0.0 {
                    1.0
                } else {
                    r.powf(self.gamma)
                }
            }
            Variant::Composite => {
                if r <= 1.0 {
                    r
                } else {
                    1.0 / r
                }
            }
        }
    }

    /// Exponent governing the kernel near `u = v`.
    fn local_exponent(&self) -> f64 {
        match self.variant {
            Variant::PowerLaw => self.gamma,
            Variant::Composite => 1.0,
        }
    }

    /// `B(u - v, ω)`, zero inside `cutoff_eps · h_v`.
    pub fn eval(&self, u: &[f64], v: &[f64], omega: &[f64], h_v: f64) -> Result<f64> {
        let z: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
        let r = z.iter().map(|c| c * c).sum::<f64>().sqrt();
        if r == 0.0 && self.cutoff_eps == 0.0 {
            return Err(Error::Singularity("u = v with cutoff_eps = 0".into()));
        }
        if r < self.cutoff_eps * h_v || r == 0.0 {
            return Ok(0.0);
        }
        let c = z.iter().zip(omega).map(|(a, b)| a * b).sum::<f64>() / r;
        Ok(self.radial(r) * self.b.eval(c))
    }

    /// Lattice weight placed at `u = v` for spacing `h` (zero when disabled).
    pub fn origin_weight(&self, d: usize, h: f64) -> f64 {
        if !self.origin_correction {
            return 0.0;
        }
        let g = self.local_exponent();
        lattice_origin_weight(d, g, self.cutoff_eps) * h.powf(d as f64 + g) * self.b.l1_norm(d)
    }
}

/// Nodes and weights on `S^{d-1}`.
#[derive(Clone, Debug)]
pub struct SphereQuadrature {
    pub d: usize,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

/// `d = 2`: `order` uniform angles. `d = 3`: `order` Gauss–Legendre nodes in
/// `cos θ` times `2·order` uniform azimuths (exact to degree `2·order − 1`).
pub fn sphere_quadrature(d: usize, order: usize) -> Result<SphereQuadrature> {
    if order < 4 {
        return Err(Error::Parameter(format!("sphere quadrature order must be >= 4, got {order}")));
    }
    match d {
        2 => {
            let w = 2.0 * PI / order as f64;
            let nodes = (0..order)
                .map(|k| {
                    let t = w * k as f64;
                    vec![t.cos(), t.sin()]
                })
                .collect();
            Ok(SphereQuadrature { d, nodes, weights: vec![w; order] })
        }
        3 => {
            let (z, wz) = gauss_legendre(order);
            let n_phi = 2 * order;
            let dphi = 2.0 * PI / n_phi as f64;
            let mut nodes = Vec::with_capacity(order * n_phi);
            let mut weights = Vec::with_capacity(order * n_phi);
            for (&c, &wc) in z.iter().zip(&wz) {
                let s = (1.0 - c * c).max(0.0).sqrt();
                for k in 0..n_phi {
                    let p = dphi * k as f64;
                    nodes.push(vec![s * p.cos(), s * p.sin(), c]);
                    weights.push(wc * dphi);
                }
            }
            Ok(SphereQuadrature { d, nodes, weights })
        }
        _ => Err(Error::Unsupported(format!("sphere quadrature in dimension {d}"))),
    }
}

impl SphereQuadrature {
    /// Folds antipodal pairs together (valid for even integrands).
    pub fn folded(&self) -> SphereQuadrature {
        let mut nodes: Vec<Vec<f64>> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        'outer: for (n, &w) in self.nodes.iter().zip(&self.weights) {
            for (m, wm) in nodes.iter().zip(weights.iter_mut()) {
                if n.iter().zip(m).all(|(a, b)| (a + b).abs() < 1e-12) {
                    *wm += w;
                    continue 'outer;
                }
            }
            nodes.push(n.clone());
            weights.push(w);
        }
        SphereQuadrature { d: self.d, nodes, weights }
    }

    /// `Σ_k b(e·ω_k) w_k`.
    pub fn angular_sum(&self, b: Angular, e: &[f64]) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(n, w)| b.eval(n.iter().zip(e).map(|(a, c)| a * c).sum()) * w)
            .sum()
    }
}

/// Radial–angular rule for `∫ F(η) |η|^{-d-γ} dη` over `|η| ≤ radius`.
#[derive(Clone, Debug)]
pub struct EtaRule {
    pub radius: f64,
    pub n_radial: usize,
    pub n_angular: usize,
}

impl EtaRule {
    /// Radius at the Nyquist frequency of `vg`.
    pub fn for_grid(vg: &VelocityGrid) -> EtaRule {
        EtaRule { radius: PI / vg.h(), n_radial: 32, n_angular: if vg.d == 2 { 48 } else { 12 } }
    }

    fn nodes(&self, d: usize, gamma_exp: f64) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let (r, wr) = radial_rule(self.n_radial, self.radius, -1.0 - gamma_exp);
        let sq = sphere_quadrature(d, self.n_angular.max(4))?;
        let mut nodes = Vec::with_capacity(r.len() * sq.nodes.len());
        let mut weights = Vec::with_capacity(nodes.capacity());
        for (&ri, &wi) in r.iter().zip(&wr) {
            for (n, &wn) in sq.nodes.iter().zip(&sq.weights) {
                nodes.push(n.iter().map(|c| c * ri).collect());
                weights.push(wi * wn);
            }
        }
        Ok((nodes, weights))
    }
}

fn check_grid(f: &PhaseField, grid: &Grid) -> Result<DenseField> {
    match f {
        PhaseField::Dense(df) => {
            if &df.grid != grid {
                return Err(Error::GridMismatch(format!("{:?} vs {:?}", df.grid, grid)));
            }
            Ok(df.clone())
        }
        PhaseField::Analytic(_) => Ok(f.to_dense(grid)),
    }
}

fn slice_key(s: &[f64]) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for x in s {
        x.to_bits().hash(&mut h);
    }
    h.finish()
}

/// Applies a bilinear velocity operator slice by slice in x, computing each
/// distinct nonzero `(f, g)` slice pair once.
pub fn map_slices<F>(f: &DenseField, g: &DenseField, op: F) -> DenseField
where
    F: Fn(&[f64], &[f64]) -> Vec<f64> + Sync,
{
    let nx = f.grid.x_len();
    let mut unique: Vec<usize> = Vec::new();
    let mut owner = vec![usize::MAX; nx];
    let mut seen: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
    for ix in 0..nx {
        let (fs, gs) = (f.slice(ix), g.slice(ix));
        if fs.iter().all(|&x| x == 0.0) || gs.iter().all(|&x| x == 0.0) {
            continue;
        }
        let bucket = seen.entry((slice_key(fs), slice_key(gs))).or_default();
        let hit = bucket
            .iter()
            .copied()
            .find(|&u| f.slice(unique[u]) == fs && g.slice(unique[u]) == gs);
        owner[ix] = match hit {
            Some(u) => u,
            None => {
                unique.push(ix);
                bucket.push(unique.len() - 1);
                unique.len() - 1
            }
        };
    }
    let results: Vec<Vec<f64>> =
        unique.par_iter().map(|&ix| op(f.slice(ix), g.slice(ix))).collect();
    let mut out = DenseField::zeros(&f.grid);
    for ix in 0..nx {
        if owner[ix] != usize::MAX {
            out.slice_mut(ix).copy_from_slice(&results[owner[ix]]);
        }
    }
    out
}

/// Per-axis index range `[lo, hi]` of the nonzero entries, or `None`.
fn nonzero_box(s: &[f64], n: usize, d: usize) -> Option<Vec<(isize, isize)>> {
    let mut b = vec![(isize::MAX, isize::MIN); d];
    let mut any = false;
    for (flat, &x) in s.iter().enumerate() {
        if x != 0.0 {
            any = true;
            let mut rem = flat;
            for a in (0..d).rev() {
                let i = (rem % n) as isize;
                rem /= n;
                b[a].0 = b[a].0.min(i);
                b[a].1 = b[a].1.max(i);
            }
        }
    }
    any.then_some(b)
}

const PAD: usize = 2;

fn padded(s: &[f64], n: usize, d: usize) -> Vec<f64> {
    let np = n + 2 * PAD;
    let mut out = vec![0.0; np.pow(d as u32)];
    for (flat, &x) in s.iter().enumerate() {
        let mut rem = flat;
        let mut off = 0;
        let mut mul = 1;
        for _ in 0..d {
            let i = rem % n;
            rem /= n;
            off += (i + PAD) * mul;
            mul *= np;
        }
        out[off] = x;
    }
    out
}

/// Direct velocity-space collision quadrature on one lattice.
pub struct VelocityOps {
    pub vg: VelocityGrid,
    pub kernel: CollisionKernel,
    half: SphereQuadrature,
    /// Loss convolution weights over offsets `w ∈ (-(n-1)..n)^d`.
    loss_table: Vec<f64>,
    origin: f64,
    b_norm: f64,
}

impl VelocityOps {
    pub fn new(vg: VelocityGrid, kernel: &CollisionKernel, sq: &SphereQuadrature) -> Result<VelocityOps> {
        kernel.validate(vg.d)?;
        if sq.d != vg.d {
            return Err(Error::GridMismatch(format!(
                "sphere rule for d = {} on a d = {} grid",
                sq.d, vg.d
            )));
        }
        let d = vg.d;
        let n = vg.n as isize;
        let h = vg.h();
        let half = sq.folded();
        let span = (2 * n - 1) as usize;
        let mut loss_table = vec![0.0; span.pow(d as u32)];
        let cell = h.powi(d as i32);
        for (flat, slot) in loss_table.iter_mut().enumerate() {
            let w = offset_of(flat, span, d, n - 1);
            let r = norm_i(&w);
            if r == 0.0 || r < kernel.cutoff_eps {
                continue;
            }
            let e: Vec<f64> = w.iter().map(|&c| c as f64 / r).collect();
            *slot = kernel.radial(r * h) * half.angular_sum(kernel.b, &e) * cell;
        }
        Ok(VelocityOps {
            vg,
            kernel: kernel.clone(),
            half,
            loss_table,
            origin: kernel.origin_weight(d, h),
            b_norm: kernel.b.l1_norm(d),
        })
    }

    /// `‖b‖_{L¹}` of the kernel's angular factor.
    pub fn b_norm(&self) -> f64 {
        self.b_norm
    }

    /// `Σ_u g(u) B(u - v) h^d` at every node (plus the origin weight).
    pub fn loss_potential(&self, g: &[f64]) -> Vec<f64> {
        let d = self.vg.d;
        let n = self.vg.n;
        let span = 2 * n - 1;
        let mut out = vec![0.0; g.len()];
        let gnodes: Vec<(Vec<usize>, f64)> = (0..g.len())
            .filter(|&i| g[i] != 0.0)
            .map(|i| (crate::field::unflatten(i, n, d), g[i]))
            .collect();
        for (iv, slot) in out.iter_mut().enumerate() {
            let vi = crate::field::unflatten(iv, n, d);
            let mut acc = 0.0;
            for (ui, gv) in &gnodes {
                let mut off = 0;
                for a in 0..d {
                    off = off * span + (vi[a] + n - 1 - ui[a]);
                }
                acc += gv * self.loss_table[off];
            }
            *slot = acc + self.origin * g[iv];
        }
        out
    }

    pub fn loss_slice(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        if f.iter().all(|&x| x == 0.0) {
            return vec![0.0; f.len()];
        }
        let p = self.loss_potential(g);
        f.iter().zip(&p).map(|(a, b)| a * b).collect()
    }

    pub fn gain_slice(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let d = self.vg.d;
        let n = self.vg.n;
        let mut out = vec![0.0; f.len()];
        let (Some(bf), Some(bg)) = (nonzero_box(f, n, d), nonzero_box(g, n, d)) else {
            return out;
        };
        let fp = padded(f, n, d);
        let gp = padded(g, n, d);
        let h = self.vg.h();
        let cell = h.powi(d as i32);
        let ni = n as isize;
        let span = (2 * n - 1) as usize;
        let count = span.pow(d as u32);
        for flat in 0..count {
            let w = offset_of(flat, span, d, ni - 1);
            let r = norm_i(&w);
            if r == 0.0 || r < self.kernel.cutoff_eps {
                continue;
            }
            // v ranges over nodes with u = v - w also on the lattice.
            let mut base_lo = [0isize; 3];
            let mut base_hi = [0isize; 3];
            for a in 0..d {
                base_lo[a] = w[a].max(0);
                base_hi[a] = (ni - 1).min(ni - 1 + w[a]);
            }
            let rad = self.kernel.radial(r * h) * cell;
            for (om, &wo) in self.half.nodes.iter().zip(&self.half.weights) {
                let proj: f64 = (0..d).map(|a| om[a] * w[a] as f64).sum();
                let bval = self.kernel.b.eval(proj / r);
                if bval == 0.0 {
                    continue;
                }
                let weight = rad * bval * wo;
                let mut kf = [0isize; 3];
                let mut af = [0.0; 3];
                let mut kg = [0isize; 3];
                let mut ag = [0.0; 3];
                let mut lo = [0isize; 3];
                let mut hi = [0isize; 3];
                let mut empty = false;
                for a in 0..d {
                    let delta = proj * om[a];
                    let sf = -delta;
                    let sg = delta - w[a] as f64;
                    let fl = sf.floor();
                    kf[a] = fl as isize;
                    af[a] = sf - fl;
                    let gl = sg.floor();
                    kg[a] = gl as isize;
                    ag[a] = sg - gl;
                    // points below the box read as zero
                    lo[a] = base_lo[a]
                        .max(bf[a].0 - 1 - kf[a])
                        .max(bg[a].0 - 1 - kg[a])
                        .max(-kf[a])
                        .max(-kg[a]);
                    hi[a] = base_hi[a].min(bf[a].1 - kf[a]).min(bg[a].1 - kg[a]);
                    if lo[a] > hi[a] {
                        empty = true;
                        break;
                    }
                }
                if empty {
                    continue;
                }
                if d == 2 {
                    gain_kernel_2d(&mut out, &fp, &gp, n, weight, &kf, &af, &kg, &ag, &lo, &hi);
                } else {
                    gain_kernel_3d(&mut out, &fp, &gp, n, weight, &kf, &af, &kg, &ag, &lo, &hi);
                }
            }
        }
        if self.origin != 0.0 {
            for ((o, a), b) in out.iter_mut().zip(f).zip(g) {
                *o += self.origin * a * b;
            }
        }
        out
    }

    /// Loss at an arbitrary velocity `v` against samples of `g` on the lattice
    /// (no origin weight; `v` is generally off-lattice).
    pub fn loss_rate_at(&self, g: &[f64], v: &[f64]) -> f64 {
        let d = self.vg.d;
        let h = self.vg.h();
        let cell = h.powi(d as i32);
        let mut acc = 0.0;
        for (iu, &gu) in g.iter().enumerate() {
            if gu == 0.0 {
                continue;
            }
            let u = self.vg.point(iu);
            let z: Vec<f64> = u.iter().zip(v).map(|(a, b)| a - b).collect();
            let r = z.iter().map(|c| c * c).sum::<f64>().sqrt();
            if r < self.kernel.cutoff_eps * h || r == 0.0 {
                continue;
            }
            let e: Vec<f64> = z.iter().map(|c| c / r).collect();
            acc += gu * self.kernel.radial(r) * self.half.angular_sum(self.kernel.b, &e) * cell;
        }
        acc
    }
}

fn offset_of(mut flat: usize, span: usize, d: usize, shift: isize) -> [isize; 3] {
    let mut w = [0isize; 3];
    for a in (0..d).rev() {
        w[a] = (flat % span) as isize - shift;
        flat /= span;
    }
    w
}

fn norm_i(w: &[isize; 3]) -> f64 {
    ((w[0] * w[0] + w[1] * w[1] + w[2] * w[2]) as f64).sqrt()
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gain_kernel_2d(
    out: &mut [f64],
    fp: &[f64],
    gp: &[f64],
    n: usize,
    weight: f64,
    kf: &[isize; 3],
    af: &[f64; 3],
    kg: &[isize; 3],
    ag: &[f64; 3],
    lo: &[isize; 3],
    hi: &[isize; 3],
) {
    let np = (n + 2 * PAD) as isize;
    let p = PAD as isize;
    let (f00, f01, f10, f11) =
        ((1.0 - af[0]) * (1.0 - af[1]), (1.0 - af[0]) * af[1], af[0] * (1.0 - af[1]), af[0] * af[1]);
    let (g00, g01, g10, g11) =
        ((1.0 - ag[0]) * (1.0 - ag[1]), (1.0 - ag[0]) * ag[1], ag[0] * (1.0 - ag[1]), ag[0] * ag[1]);
    let npu = np as usize;
    for i0 in lo[0]..=hi[0] {
        let rf = ((i0 + kf[0] + p) * np + p + kf[1]) as usize;
        let rg = ((i0 + kg[0] + p) * np + p + kg[1]) as usize;
        let ro = i0 as usize * n;
        for i1 in lo[1]..=hi[1] {
            let i1 = i1 as usize;
            let a = rf + i1;
            let b = rg + i1;
            let fv = f00 * fp[a] + f01 * fp[a + 1] + f10 * fp[a + npu] + f11 * fp[a + npu + 1];
            let gv = g00 * gp[b] + g01 * gp[b + 1] + g10 * gp[b + npu] + g11 * gp[b + npu + 1];
            out[ro + i1] += weight * fv * gv;
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn gain_kernel_3d(
    out: &mut [f64],
    fp: &[f64],
    gp: &[f64],
    n: usize,
    weight: f64,
    kf: &[isize; 3],
    af: &[f64; 3],
    kg: &[isize; 3],
    ag: &[f64; 3],
    lo: &[isize; 3],
    hi: &[isize; 3],
) {
    let np = (n + 2 * PAD) as isize;
    let p = PAD as isize;
    let corners = |a: &[f64; 3]| {
        let mut c = [0.0; 8];
        for (k, slot) in c.iter_mut().enumerate() {
            let mut w = 1.0;
            for ax in 0..3 {
                let bit = (k >> (2 - ax)) & 1;
                w *= if bit == 1 { a[ax] } else { 1.0 - a[ax] };
            }
            *slot = w;
        }
        c
    };
    let (cf, cg) = (corners(af), corners(ag));
    let npu = np as usize;
    let offs = [0, 1, npu, npu + 1, npu * npu, npu * npu + 1, npu * npu + npu, npu * npu + npu + 1];
    for i0 in lo[0]..=hi[0] {
        for i1 in lo[1]..=hi[1] {
            let rf = (((i0 + kf[0] + p) * np + i1 + kf[1] + p) * np + p + kf[2]) as usize;
            let rg = (((i0 + kg[0] + p) * np + i1 + kg[1] + p) * np + p + kg[2]) as usize;
            let ro = (i0 as usize * n + i1 as usize) * n;
            for i2 in lo[2]..=hi[2] {
                let i2 = i2 as usize;
                let (a, b) = (rf + i2, rg + i2);
                let mut fv = 0.0;
                let mut gv = 0.0;
                for k in 0..8 {
                    fv += cf[k] * fp[a + offs[k]];
                    gv += cg[k] * gp[b + offs[k]];
                }
                out[ro + i2] += weight * fv * gv;
            }
        }
    }
}

/// `Q⁻(f, g)` by direct quadrature.
pub fn q_loss_direct(
    f: &PhaseField,
    g: &PhaseField,
    kernel: &CollisionKernel,
    grid: &Grid,
    sq: &SphereQuadrature,
) -> Result<PhaseField> {
    let (f, g) = (check_grid(f, grid)?, check_grid(g, grid)?);
    let ops = VelocityOps::new(grid.velocity(), kernel, sq)?;
    Ok(PhaseField::Dense(map_slices(&f, &g, |a, b| ops.loss_slice(a, b))))
}

/// `Q⁺(f, g)` by direct quadrature with interpolated post-collision values.
pub fn q_gain_direct(
    f: &PhaseField,
    g: &PhaseField,
    kernel: &CollisionKernel,
    grid: &Grid,
    sq: &SphereQuadrature,
) -> Result<PhaseField> {
    let (f, g) = (check_grid(f, grid)?, check_grid(g, grid)?);
    let ops = VelocityOps::new(grid.velocity(), kernel, sq)?;
    Ok(PhaseField::Dense(map_slices(&f, &g, |a, b| ops.gain_slice(a, b))))
}

/// `C⁻¹` in `|z|^γ = C⁻¹ ∫ |η|^{-d-γ} e^{iη·z} dη`.
pub fn riesz_constant(d: usize, gamma_exp: f64) -> f64 {
    let df = d as f64;
    2f64.powf(gamma_exp) * PI.powf(-df / 2.0) * gamma((df + gamma_exp) / 2.0) / gamma(-gamma_exp / 2.0)
}

/// Oversampled velocity Fourier transform `f̂(ζ) = ∫ f(v) e^{-iv·ζ} dv` with
/// 4-point interpolation in each axis; zero beyond the Nyquist box.
struct SpectrumTable {
    d: usize,
    m: usize,
    dz: f64,
    values: Vec<Complex64>,
}

impl SpectrumTable {
    fn new(s: &[f64], vg: &VelocityGrid, pad: usize) -> SpectrumTable {
        let d = vg.d;
        let n = vg.n;
        let m = n * pad;
        let h = vg.h();
        let mut buf = vec![Complex64::new(0.0, 0.0); m.pow(d as u32)];
        for (flat, &x) in s.iter().enumerate() {
            let idx = crate::field::unflatten(flat, n, d);
            let off = idx.iter().fold(0, |acc, &i| acc * m + i);
            buf[off] = Complex64::new(x, 0.0);
        }
        let shape = vec![m; d];
        let axes: Vec<usize> = (0..d).collect();
        fft_axes(&mut buf, &shape, &axes, false);
        let dz = 2.0 * PI / (m as f64 * h);
        let cell = h.powi(d as i32);
        // f̂(ζ) = h^d e^{iL Σζ} Σ_j f_j e^{-i j h ζ}
        for (flat, c) in buf.iter_mut().enumerate() {
            let idx = crate::field::unflatten(flat, m, d);
            let phase: f64 = idx.iter().map(|&i| crate::field::frequency(i, m, m as f64 * h) * vg.l).sum();
            *c *= Complex64::from_polar(cell, phase);
        }
        SpectrumTable { d, m, dz, values: buf }
    }

    #[inline]
    fn weights(t: f64) -> [f64; 4] {
        // cubic Lagrange on nodes -1, 0, 1, 2
        [
            -t * (t - 1.0) * (t - 2.0) / 6.0,
            (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
            -(t + 1.0) * t * (t - 2.0) / 2.0,
            (t + 1.0) * t * (t - 1.0) / 6.0,
        ]
    }

    fn at(&self, z: &[f64]) -> Complex64 {
        let half = (self.m / 2) as isize;
        let mut base = [0isize; 3];
        let mut w = [[0.0; 4]; 3];
        for a in 0..self.d {
            let s = z[a] / self.dz;
            let fl = s.floor();
            let i = fl as isize;
            if i - 1 < -half || i + 2 >= half {
                return Complex64::new(0.0, 0.0);
            }
            base[a] = i;
            w[a] = Self::weights(s - fl);
        }
        let m = self.m as isize;
        let wrap = |i: isize| (if i < 0 { i + m } else { i }) as usize;
        let mut acc = Complex64::new(0.0, 0.0);
        if self.d == 2 {
            for p in 0..4 {
                let row = wrap(base[0] + p as isize - 1) * self.m;
                let mut inner = Complex64::new(0.0, 0.0);
                for q in 0..4 {
                    inner += self.values[row + wrap(base[1] + q as isize - 1)] * w[1][q];
                }
                acc += inner * w[0][p];
            }
        } else {
            for p in 0..4 {
                let r0 = wrap(base[0] + p as isize - 1) * self.m;
                for q in 0..4 {
                    let r1 = (r0 + wrap(base[1] + q as isize - 1)) * self.m;
                    let wpq = w[0][p] * w[1][q];
                    for k in 0..4 {
                        acc += self.values[r1 + wrap(base[2] + k as isize - 1)] * (wpq * w[2][k]);
                    }
                }
            }
        }
        acc
    }
}

fn spectral_pad(d: usize) -> usize {
    if d == 2 {
        8
    } else {
        4
    }
}

/// Inverse transform of samples `F(ξ_k)` on the lattice's own frequency grid.
fn inverse_velocity(spec: Vec<Complex64>, vg: &VelocityGrid) -> Vec<f64> {
    let d = vg.d;
    let n = vg.n;
    let mut buf = spec;
    for (flat, c) in buf.iter_mut().enumerate() {
        let idx = crate::field::unflatten(flat, n, d);
        let parity: usize = idx.iter().sum();
        if parity % 2 == 1 {
            *c = -*c;
        }
    }
    let shape = vec![n; d];
    let axes: Vec<usize> = (0..d).collect();
    fft_axes(&mut buf, &shape, &axes, true);
    let inv = vg.h().powi(-(d as i32));
    buf.into_iter().map(|c| c.re * inv).collect()
}

fn check_spectral(kernel: &CollisionKernel, vg: &VelocityGrid, eta: &EtaRule) -> Result<()> {
    kernel.validate(vg.d)?;
    if kernel.variant != Variant::PowerLaw {
        return Err(Error::Unsupported("spectral form needs a power-law kernel".into()));
    }
    if kernel.gamma >= 0.0 {
        return Err(Error::Unsupported("spectral form needs gamma < 0; use the direct form".into()));
    }
    let nyq = PI / vg.h();
    if eta.radius > nyq * (1.0 + 1e-12) {
        return Err(Error::Resolution(format!(
            "eta radius {} exceeds the Nyquist frequency {nyq}",
            eta.radius
        )));
    }
    Ok(())
}

/// Gain slice through the Fourier representation.
pub fn gain_slice_spectral(
    f: &[f64],
    g: &[f64],
    kernel: &CollisionKernel,
    vg: &VelocityGrid,
    sq: &SphereQuadrature,
    eta: &EtaRule,
) -> Result<Vec<f64>> {
    check_spectral(kernel, vg, eta)?;
    let d = vg.d;
    let n = vg.n;
    if f.iter().all(|&x| x == 0.0) || g.iter().all(|&x| x == 0.0) {
        return Ok(vec![0.0; f.len()]);
    }
    let pad = spectral_pad(d);
    let (tf, tg) = (SpectrumTable::new(f, vg, pad), SpectrumTable::new(g, vg, pad));
    let (eta_nodes, eta_w) = eta.nodes(d, kernel.gamma)?;
    let half = sq.folded();
    let c = riesz_constant(d, kernel.gamma);
    let b_norm = kernel.b.l1_norm(d);
    let period = 2.0 * vg.l;
    let spec: Vec<Complex64> = (0..vg.len())
        .into_par_iter()
        .map(|k| {
            let idx = crate::field::unflatten(k, n, d);
            let xi: Vec<f64> = idx.iter().map(|&i| crate::field::frequency(i, n, period)).collect();
            let norm = xi.iter().map(|a| a * a).sum::<f64>().sqrt();
            let mut zf = [0.0; 3];
            let mut zg = [0.0; 3];
            let mut total = Complex64::new(0.0, 0.0);
            let mut body = |plus: &[f64], weight: f64| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (e, &we) in eta_nodes.iter().zip(&eta_w) {
                    for a in 0..d {
                        zf[a] = xi[a] - plus[a] + e[a];
                        zg[a] = plus[a] - e[a];
                    }
                    let a = tf.at(&zf[..d]);
                    if a.re == 0.0 && a.im == 0.0 {
                        continue;
                    }
                    acc += a * tg.at(&zg[..d]) * we;
                }
                total += acc * weight;
            };
            if norm == 0.0 {
                body(&[0.0; 3][..d], b_norm);
            } else {
                for (om, &wo) in half.nodes.iter().zip(&half.weights) {
                    let proj: f64 = (0..d).map(|a| om[a] * xi[a]).sum();
                    let bval = kernel.b.eval(proj / norm);
                    if bval == 0.0 {
                        continue;
                    }
                    let plus: Vec<f64> = om.iter().map(|o| o * proj).collect();
                    body(&plus, bval * wo);
                }
            }
            total * c
        })
        .collect();
    Ok(inverse_velocity(spec, vg))
}

/// `Σ_u g(u)|u - v|^γ ‖b‖` at every node through the Fourier representation.
pub fn loss_potential_spectral(
    g: &[f64],
    kernel: &CollisionKernel,
    vg: &VelocityGrid,
    eta: &EtaRule,
) -> Result<Vec<f64>> {
    let d = vg.d;
    let b_norm = kernel.b.l1_norm(d);
    if kernel.gamma == 0.0 && kernel.variant == Variant::PowerLaw {
        let mass: f64 = g.iter().sum::<f64>() * vg.cell_volume();
        return Ok(vec![mass * b_norm; g.len()]);
    }
    check_spectral(kernel, vg, eta)?;
    let tg = SpectrumTable::new(g, vg, spectral_pad(d));
    let (eta_nodes, eta_w) = eta.nodes(d, kernel.gamma)?;
    let c = riesz_constant(d, kernel.gamma) * b_norm;
    let gh: Vec<Complex64> = eta_nodes.iter().zip(&eta_w).map(|(e, &w)| tg.at(e) * w).collect();
    Ok((0..vg.len())
        .into_par_iter()
        .map(|iv| {
            let v = vg.point(iv);
            let mut acc = Complex64::new(0.0, 0.0);
            for (e, gw) in eta_nodes.iter().zip(&gh) {
                let ph: f64 = e.iter().zip(&v).map(|(a, b)| a * b).sum();
                acc += gw * Complex64::from_polar(1.0, ph);
            }
            acc.re * c
        })
        .collect())
}

/// `Q⁺(f, g)` through the Bobylev representation.
pub fn q_gain_spectral(
    f: &PhaseField,
    g: &PhaseField,
    kernel: &CollisionKernel,
    grid: &Grid,
    sq: &SphereQuadrature,
    eta: &EtaRule,
) -> Result<PhaseField> {
    let vg = grid.velocity();
    check_spectral(kernel, &vg, eta)?;
    let (f, g) = (f.as_dense()?, g.as_dense()?);
    if f.grid != *grid || g.grid != *grid {
        return Err(Error::GridMismatch("fields are not on the requested grid".into()));
    }
    let out = map_slices(f, g, |a, b| {
        gain_slice_spectral(a, b, kernel, &vg, sq, eta).expect("validated spectral inputs")
    });
    Ok(PhaseField::Dense(out))
}

/// `Q⁻(f, g)` through the Fourier representation (`γ = 0` uses `f·‖b‖∫g`).
pub fn q_loss_spectral(
    f: &PhaseField,
    g: &PhaseField,
    kernel: &CollisionKernel,
    grid: &Grid,
) -> Result<PhaseField> {
    let vg = grid.velocity();
    let eta = EtaRule::for_grid(&vg);
    if kernel.gamma < 0.0 {
        check_spectral(kernel, &vg, &eta)?;
    } else {
        kernel.validate(grid.d)?;
    }
    let (f, g) = (f.as_dense()?, g.as_dense()?);
    if f.grid != *grid || g.grid != *grid {
        return Err(Error::GridMismatch("fields are not on the requested grid".into()));
    }
    let out = map_slices(f, g, |a, b| {
        let p = loss_potential_spectral(b, kernel, &vg, &eta).expect("validated spectral inputs");
        a.iter().zip(&p).map(|(x, y)| x * y).collect()
    });
    Ok(PhaseField::Dense(out))
}

/// Maximum over x of the relative moment defects of `Q(f, f)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Invariants {
    pub mass_residual: f64,
    pub momentum_residual: f64,
    pub energy_residual: f64,
}

pub fn collision_invariants(
    f: &PhaseField,
    kernel: &CollisionKernel,
    grid: &Grid,
    sq: &SphereQuadrature,
) -> Result<Invariants> {
    let f = check_grid(f, grid)?;
    let ops = VelocityOps::new(grid.velocity(), kernel, sq)?;
    let vg = grid.velocity();
    let d = grid.d;
    let vs: Vec<Vec<f64>> = (0..vg.len()).map(|i| vg.point(i)).collect();
    let cell = vg.cell_volume();
    let per_slice = map_slices(&f, &f, |a, _| {
        let gain = ops.gain_slice(a, a);
        let loss = ops.loss_slice(a, a);
        // moments packed as [mass, momentum.., energy] for Q and Q⁺
        let mut out = vec![0.0; a.len()];
        let mut q = vec![0.0; d + 2];
        let mut qp = vec![0.0; d + 2];
        for (i, v) in vs.iter().enumerate() {
            let e: f64 = v.iter().map(|c| c * c).sum();
            let diff = (gain[i] - loss[i]) * cell;
            let gp = gain[i] * cell;
            q[0] += diff;
            qp[0] += gp;
            for a in 0..d {
                q[1 + a] += diff * v[a];
                qp[1 + a] += gp * v[a];
            }
            q[d + 1] += diff * e;
            qp[d + 1] += gp * e;
        }
        out[..d + 2].copy_from_slice(&q);
        out[d + 2..2 * d + 4].copy_from_slice(&qp);
        out
    });
    let mut inv = Invariants { mass_residual: 0.0, momentum_residual: 0.0, energy_residual: 0.0 };
    for ix in 0..grid.x_len() {
        let s = per_slice.slice(ix);
        let (q, qp) = (&s[..d + 2], &s[d + 2..2 * d + 4]);
        let mom = (1..=d).map(|a| q[a] * q[a]).sum::<f64>().sqrt();
        let momp = (1..=d).map(|a| qp[a] * qp[a]).sum::<f64>().sqrt();
        inv.mass_residual = inv.mass_residual.max(q[0].abs() / (1.0 + qp[0].abs()));
        inv.momentum_residual = inv.momentum_residual.max(mom / (1.0 + momp));
        inv.energy_residual = inv.energy_residual.max(q[d + 1].abs() / (1.0 + qp[d + 1].abs()));
    }
    Ok(inv)
}
