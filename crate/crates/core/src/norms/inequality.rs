//! Randomized sampling of functional inequalities: worst observed LHS/RHS.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collision::{sphere_quadrature, Angular, CollisionKernel, SphereQuadrature, VelocityOps};
use crate::error::{Error, Result};
use crate::field::{fft_axes, frequency, VelocityGrid};
use crate::quad::{gauss_legendre, lattice_origin_weight, radial_rule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InequalityKind {
    HLS,
    EndpointHLS,
    QGainLr,
    QLossLr,
    QGainL1,
    FracLeibniz,
    Strichartz,
    QGainHalfHalf,
}

impl InequalityKind {
    pub const ALL: [InequalityKind; 8] = [
        InequalityKind::HLS,
        InequalityKind::EndpointHLS,
        InequalityKind::QGainLr,
        InequalityKind::QLossLr,
        InequalityKind::QGainL1,
        InequalityKind::FracLeibniz,
        InequalityKind::Strichartz,
        InequalityKind::QGainHalfHalf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InequalityKind::HLS => "HLS",
            InequalityKind::EndpointHLS => "EndpointHLS",
            InequalityKind::QGainLr => "QGainLr",
            InequalityKind::QLossLr => "QLossLr",
            InequalityKind::QGainL1 => "QGainL1",
            InequalityKind::FracLeibniz => "FracLeibniz",
            InequalityKind::Strichartz => "Strichartz",
            InequalityKind::QGainHalfHalf => "QGainHalfHalf",
        }
    }

    /// Number of independent random inputs.
    fn arity(self) -> usize {
        match self {
            InequalityKind::EndpointHLS | InequalityKind::Strichartz => 1,
            _ => 2,
        }
    }
}

impl std::str::FromStr for InequalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InequalityKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parameter(format!("unknown inequality kind {s}")))
    }
}

/// Random inputs: `1..=max_components` shifted truncated Gaussians or ball
/// indicators, centers uniform in `[-center_spread, center_spread]^d`,
/// widths log-uniform in `[min_width, max_width]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldFamily {
    pub max_components: usize,
    pub center_spread: f64,
    pub min_width: f64,
    pub max_width: f64,
}

/// Gaussians are cut at this many widths.
const GAUSSIAN_REACH: f64 = 2.5;

impl FieldFamily {
    /// Radius of a ball containing every member.
    pub fn extent(&self, d: usize) -> f64 {
        self.center_spread * (d as f64).sqrt() + GAUSSIAN_REACH * self.max_width
    }

    pub fn draw(&self, d: usize, rng: &mut ChaCha8Rng) -> Mixture {
        let count = rng.random_range(1..=self.max_components.max(1));
        let (lo, hi) = (self.min_width.ln(), self.max_width.ln());
        let components = (0..count)
            .map(|_| {
                let center = (0..d).map(|_| rng.random_range(-1.0..=1.0) * self.center_spread).collect();
                let width = if hi > lo { rng.random_range(lo..hi).exp() } else { self.min_width };
                let amplitude = rng.random_range(0.2..1.0);
                let ball = rng.random_bool(0.5);
                Bump { center, width, amplitude, ball }
            })
            .collect();
        Mixture { components }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bump {
    pub center: Vec<f64>,
    pub width: f64,
    pub amplitude: f64,
    /// Indicator of the ball of radius `width` instead of a Gaussian.
    pub ball: bool,
}

/// Nonnegative compactly supported test function.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixture {
    pub components: Vec<Bump>,
}

impl Mixture {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let r2: f64 = x.iter().zip(&c.center).map(|(a, b)| (a - b) * (a - b)).sum();
                let w2 = c.width * c.width;
                if c.ball {
                    if r2 <= w2 {
                        c.amplitude
                    } else {
                        0.0
                    }
                } else if r2 <= GAUSSIAN_REACH * GAUSSIAN_REACH * w2 {
                    c.amplitude * (-0.5 * r2 / w2).exp()
                } else {
                    0.0
                }
            })
            .sum()
    }

    pub fn scaled(&self, a: f64) -> Mixture {
        let mut m = self.clone();
        for c in &mut m.components {
            c.amplitude *= a;
        }
        m
    }

    /// Values at the nodes `-l + i·2l/n` of `[-l, l)^d`, row-major.
    pub fn sample(&self, d: usize, n: usize, l: f64) -> Vec<f64> {
        let h = 2.0 * l / n as f64;
        let total = n.pow(d as u32);
        let mut x = vec![0.0; d];
        (0..total)
            .map(|flat| {
                let mut rem = flat;
                for a in (0..d).rev() {
                    x[a] = -l + (rem % n) as f64 * h;
                    rem /= n;
                }
                self.eval(&x)
            })
            .collect()
    }
}

/// Exponents, dimension, lattice and input family for one inequality.
///
/// Exponent roles: HLS uses `p, r`; EndpointHLS `p < q`; the collision bounds
/// `p, q → r`; QGainL1 uses `p` for `g`; FracLeibniz `r` from `p, q` with order
/// `s`; Strichartz `(q, p)` = (time, phase space) with `d` the physical dimension;
/// QGainHalfHalf `p, q` with `1/p + 1/q = 1/2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InequalitySetup {
    pub kind: InequalityKind,
    pub d: usize,
    pub gamma: f64,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    #[serde(default)]
    pub s: f64,
    /// Lattice points per axis.
    pub n: usize,
    /// Lattice half-width.
    pub l: f64,
    pub family: FieldFamily,
    /// Time window half-length (Strichartz only).
    #[serde(default)]
    pub time_window: f64,
}

pub fn default_setup(kind: InequalityKind) -> InequalitySetup {
    let fam = |spread: f64, lo: f64, hi: f64| FieldFamily {
        max_components: 3,
        center_spread: spread,
        min_width: lo,
        max_width: hi,
    };
    let base = InequalitySetup {
        kind,
        d: 2,
        gamma: -0.5,
        p: 0.0,
        q: 0.0,
        r: 0.0,
        s: 0.0,
        n: 64,
        l: 4.0,
        family: fam(1.2, 0.2, 0.8),
        time_window: 0.0,
    };
    match kind {
        InequalityKind::HLS => InequalitySetup { p: 8.0 / 7.0, r: 8.0 / 7.0, ..base },
        InequalityKind::EndpointHLS => InequalitySetup { p: 1.0, q: 2.0, ..base },
        InequalityKind::QGainLr => InequalitySetup {
            p: 2.0,
            q: 2.0,
            r: 4.0,
            n: 32,
            l: 3.0,
            family: fam(0.5, 0.2, 0.5),
            ..base
        },
        InequalityKind::QLossLr => InequalitySetup {
            p: 3.0,
            q: 12.0 / 11.0,
            r: 2.0,
            n: 32,
            l: 3.0,
            family: fam(0.8, 0.2, 0.6),
            ..base
        },
        InequalityKind::QGainL1 => InequalitySetup {
            d: 3,
            gamma: -1.0,
            p: 2.0,
            n: 10,
            l: 2.0,
            family: fam(0.25, 0.3, 0.5),
            ..base
        },
        InequalityKind::FracLeibniz => {
            InequalitySetup { p: 4.0, q: 4.0, r: 2.0, s: 0.5, ..base }
        }
        InequalityKind::Strichartz => InequalitySetup {
            q: 2.0,
            p: 4.0,
            n: 16,
            l: 6.0,
            family: fam(1.0, 1.2, 2.5),
            time_window: 1.5,
            ..base
        },
        InequalityKind::QGainHalfHalf => InequalitySetup {
            p: 4.0,
            q: 4.0,
            n: 16,
            l: 2.0,
            family: fam(0.5, 0.2, 0.6),
            ..base
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub kind: InequalityKind,
    pub trials: usize,
    pub worst_ratio: f64,
    pub seed: u64,
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn exponent_error(relation: &str, lhs: f64, rhs: f64) -> Error {
    Error::Exponent(format!("{relation} violated: {lhs} vs {rhs}"))
}

impl InequalitySetup {
    pub fn validate(&self) -> Result<()> {
        let d = self.d as f64;
        let g = self.gamma;
        if self.d != 2 && self.d != 3 {
            return Err(Error::Unsupported(format!("dimension {}", self.d)));
        }
        if self.n < 4 || !(self.l > 0.0) {
            return Err(Error::Parameter("lattice needs n >= 4 and l > 0".into()));
        }
        let fam = &self.family;
        if !(fam.min_width > 0.0 && fam.max_width >= fam.min_width && fam.center_spread >= 0.0) {
            return Err(Error::Parameter("field family widths must be positive".into()));
        }
        match self.kind {
            InequalityKind::HLS => {
                if !(g > -d && g < 0.0) || !(self.p > 1.0 && self.r > 1.0) {
                    return Err(Error::Exponent("HLS needs -d < gamma < 0 and p, r > 1".into()));
                }
                let (lhs, rhs) = (1.0 / self.p + 1.0 / self.r, 2.0 + g / d);
                if !close(lhs, rhs) {
                    return Err(exponent_error("1/p + 1/r = 2 + gamma/d", lhs, rhs));
                }
            }
            InequalityKind::EndpointHLS => {
                let mid = d / (d + g);
                if !(g > -d && g < 0.0) || !(self.p >= 1.0 && self.p < mid && mid < self.q) {
                    return Err(exponent_error("1 <= p < d/(d+gamma) < q", self.p, self.q));
                }
            }
            InequalityKind::QGainLr | InequalityKind::QLossLr => {
                if !(self.p >= 1.0 && self.q >= 1.0 && self.r >= 1.0) {
                    return Err(Error::Exponent("p, q, r must be at least 1".into()));
                }
                let (lhs, rhs) = (1.0 / self.p + 1.0 / self.q, 1.0 + g / d + 1.0 / self.r);
                if !close(lhs, rhs) {
                    return Err(exponent_error("1/p + 1/q = 1 + gamma/d + 1/r", lhs, rhs));
                }
                if self.kind == InequalityKind::QLossLr && !(self.p > self.r) {
                    return Err(exponent_error("p > r", self.p, self.r));
                }
            }
            InequalityKind::QGainL1 => {
                if !close(g, -1.0) {
                    return Err(exponent_error("gamma = -1", g, -1.0));
                }
                if !(self.p > d / (d - 1.0)) {
                    return Err(exponent_error("p > d/(d-1)", self.p, d / (d - 1.0)));
                }
            }
            InequalityKind::FracLeibniz => {
                if !(self.s > 0.0 && self.p >= 1.0 && self.q >= 1.0 && self.r >= 1.0) {
                    return Err(Error::Exponent("need s > 0 and p, q, r >= 1".into()));
                }
                let (lhs, rhs) = (1.0 / self.r, 1.0 / self.p + 1.0 / self.q);
                if !close(lhs, rhs) {
                    return Err(exponent_error("1/r = 1/p + 1/q", lhs, rhs));
                }
            }
            InequalityKind::Strichartz => {
                let (lhs, rhs) = (2.0 / self.q + 2.0 * d / self.p, d);
                if !close(lhs, rhs) || self.q < 2.0 {
                    return Err(exponent_error("2/q + 2d/p = d with q >= 2", lhs, rhs));
                }
                if !(self.time_window > 0.0) {
                    return Err(Error::Parameter("time window must be positive".into()));
                }
            }
            InequalityKind::QGainHalfHalf => {
                let (lhs, rhs) = (1.0 / self.p + 1.0 / self.q, 0.5);
                if !close(lhs, rhs) {
                    return Err(exponent_error("1/p + 1/q = 1/2", lhs, rhs));
                }
                if !(g > -d && g < 0.0) {
                    return Err(Error::Exponent("need -d < gamma < 0".into()));
                }
            }
        }
        Ok(())
    }
}

fn lp_norm(values: &[f64], cell: f64, p: f64) -> f64 {
    (values.iter().map(|x| x.abs().powf(p)).sum::<f64>() * cell).powf(1.0 / p)
}

/// Operators built once per check and shared by all trials.
enum Prepared {
    None,
    Collision(VelocityOps),
    HalfHalf { sphere: SphereQuadrature, eta: Vec<(Vec<f64>, f64)> },
}

fn prepare(setup: &InequalitySetup) -> Result<Prepared> {
    let d = setup.d;
    Ok(match setup.kind {
        InequalityKind::QGainLr | InequalityKind::QLossLr | InequalityKind::QGainL1 => {
            let kernel = CollisionKernel::power_law(setup.gamma, Angular::AbsCos);
            let order = if d == 2 { 16 } else { 4 };
            let vg = VelocityGrid { d, n: setup.n, l: setup.l };
            Prepared::Collision(VelocityOps::new(vg, &kernel, &sphere_quadrature(d, order)?)?)
        }
        InequalityKind::QGainHalfHalf => {
            let sphere = sphere_quadrature(d, if d == 2 { 16 } else { 6 })?;
            let radius = 2.0 * (setup.l * (d as f64).sqrt() + setup.family.extent(d));
            let (rn, rw) = radial_rule(24, radius, -1.0 - setup.gamma);
            let dirs = sphere_quadrature(d, if d == 2 { 24 } else { 6 })?;
            let mut eta = Vec::new();
            for (r, wr) in rn.iter().zip(&rw) {
                for (e, we) in dirs.nodes.iter().zip(&dirs.weights) {
                    eta.push((e.iter().map(|c| c * r).collect(), wr * we));
                }
            }
            Prepared::HalfHalf { sphere, eta }
        }
        _ => Prepared::None,
    })
}

/// Zero-padded lattice convolution with `|z|^γ`, including the origin weight.
fn riesz_convolve(values: &[f64], d: usize, n: usize, h: f64, gamma: f64) -> Vec<f64> {
    let m = 2 * n;
    let shape = vec![m; d];
    let total = m.pow(d as u32);
    let mut data = vec![Complex64::new(0.0, 0.0); total];
    let mut ker = vec![Complex64::new(0.0, 0.0); total];
    let cell = h.powi(d as i32);
    let origin = lattice_origin_weight(d, gamma, 0.5) * h.powf(d as f64 + gamma);
    for flat in 0..total {
        let mut rem = flat;
        let mut inside = true;
        let mut src = 0;
        let mut r2 = 0.0;
        for a in (0..d).rev() {
            let i = rem % m;
            rem /= m;
            inside &= i < n;
            let j = if i < n { i as f64 } else { i as f64 - m as f64 };
            r2 += j * j;
            src += i * n.pow((d - 1 - a) as u32);
        }
        if inside {
            data[flat].re = values[src];
        }
        ker[flat].re = if r2 == 0.0 { origin } else { (r2.sqrt() * h).powf(gamma) * cell };
    }
    let axes: Vec<usize> = (0..d).collect();
    fft_axes(&mut data, &shape, &axes, false);
    fft_axes(&mut ker, &shape, &axes, false);
    for (a, b) in data.iter_mut().zip(&ker) {
        *a *= b;
    }
    fft_axes(&mut data, &shape, &axes, true);
    let mut out = vec![0.0; n.pow(d as u32)];
    for (dst, slot) in out.iter_mut().enumerate() {
        let mut rem = dst;
        let mut flat = 0;
        for a in (0..d).rev() {
            flat += (rem % n) * m.pow((d - 1 - a) as u32);
            rem /= n;
        }
        *slot = data[flat].re;
    }
    out
}

/// `⟨∇⟩^s` on the periodic lattice.
fn bessel_potential(values: &[f64], d: usize, n: usize, l: f64, s: f64) -> Vec<f64> {
    let shape = vec![n; d];
    let mut data: Vec<Complex64> = values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    let axes: Vec<usize> = (0..d).collect();
    fft_axes(&mut data, &shape, &axes, false);
    for (flat, c) in data.iter_mut().enumerate() {
        let mut rem = flat;
        let mut k2 = 0.0;
        for _ in 0..d {
            let k = frequency(rem % n, n, 2.0 * l);
            k2 += k * k;
            rem /= n;
        }
        *c *= (1.0 + k2).powf(s / 2.0);
    }
    fft_axes(&mut data, &shape, &axes, true);
    data.into_iter().map(|c| c.re).collect()
}

fn strichartz_sides(setup: &InequalitySetup, phi: &Mixture) -> (f64, f64) {
    let d = setup.d;
    let dim = 2 * d;
    let n = setup.n;
    let h = 2.0 * setup.l / n as f64;
    let cell = h.powi(dim as i32);
    let samples = phi.sample(dim, n, setup.l);
    let rhs = lp_norm(&samples, cell, 2.0);
    let shape = vec![n; dim];
    let axes: Vec<usize> = (0..dim).collect();
    let mut spec: Vec<Complex64> = samples.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_axes(&mut spec, &shape, &axes, false);
    // k_x · k_ξ at every mode
    let phase: Vec<f64> = (0..spec.len())
        .map(|flat| {
            let mut rem = flat;
            let mut k = vec![0.0; dim];
            for a in (0..dim).rev() {
                k[a] = frequency(rem % n, n, 2.0 * setup.l);
                rem /= n;
            }
            (0..d).map(|a| k[a] * k[a + d]).sum()
        })
        .collect();
    let (tn, tw) = gauss_legendre(8);
    let big_t = setup.time_window;
    let mut acc = 0.0;
    for (t, w) in tn.iter().zip(&tw) {
        let t = t * big_t;
        let mut u: Vec<Complex64> = spec
            .iter()
            .zip(&phase)
            .map(|(c, ph)| c * Complex64::from_polar(1.0, -t * ph))
            .collect();
        fft_axes(&mut u, &shape, &axes, true);
        let lp = (u.iter().map(|c| c.norm().powf(setup.p)).sum::<f64>() * cell).powf(1.0 / setup.p);
        acc += w * big_t * lp.powf(setup.q);
    }
    (acc.powf(1.0 / setup.q), rhs)
}

fn half_half_sides(
    setup: &InequalitySetup,
    sphere: &SphereQuadrature,
    eta: &[(Vec<f64>, f64)],
    f: &Mixture,
    g: &Mixture,
) -> (f64, f64) {
    let d = setup.d;
    let b = Angular::AbsCos;
    // cell-centred ξ lattice on [-2l, 2l)^d avoids ξ = 0
    let n = setup.n;
    let lx = 2.0 * setup.l;
    let h = 2.0 * lx / n as f64;
    let total = n.pow(d as u32);
    let mut lhs_sq = 0.0;
    let mut xi = vec![0.0; d];
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    for flat in 0..total {
        let mut rem = flat;
        for a in (0..d).rev() {
            xi[a] = -lx + ((rem % n) as f64 + 0.5) * h;
            rem /= n;
        }
        let norm = xi.iter().map(|c| c * c).sum::<f64>().sqrt();
        let mut val = 0.0;
        for (om, wo) in sphere.nodes.iter().zip(&sphere.weights) {
            let c: f64 = xi.iter().zip(om).map(|(a, b)| a * b).sum::<f64>() / norm;
            let bw = b.eval(c);
            if bw == 0.0 {
                continue;
            }
            for a in 0..d {
                plus[a] = 0.5 * (xi[a] + norm * om[a]);
                minus[a] = 0.5 * (xi[a] - norm * om[a]);
            }
            let mut inner = 0.0;
            let mut p1 = vec![0.0; d];
            let mut p2 = vec![0.0; d];
            for (e, we) in eta {
                for a in 0..d {
                    p1[a] = plus[a] + e[a];
                    p2[a] = minus[a] - e[a];
                }
                let fv = f.eval(&p1);
                if fv == 0.0 {
                    continue;
                }
                inner += we * fv * g.eval(&p2);
            }
            val += wo * bw * inner;
        }
        lhs_sq += val * val;
    }
    let lhs = (lhs_sq * h.powi(d as i32)).sqrt();
    let dd = d as f64;
    let pe = 2.0 * setup.p * dd / (2.0 * dd - setup.p * setup.gamma);
    let qe = 2.0 * setup.q * dd / (2.0 * dd - setup.q * setup.gamma);
    let fine = 64;
    let cell = (2.0 * setup.l / fine as f64).powi(d as i32);
    let rhs = lp_norm(&f.sample(d, fine, setup.l), cell, pe) * lp_norm(&g.sample(d, fine, setup.l), cell, qe);
    (lhs, rhs)
}

fn sides(setup: &InequalitySetup, prep: &Prepared, fields: &[Mixture]) -> (f64, f64) {
    let d = setup.d;
    let n = setup.n;
    let h = 2.0 * setup.l / n as f64;
    let cell = h.powi(d as i32);
    let sample = |m: &Mixture| m.sample(d, n, setup.l);
    let (p, q, r, g) = (setup.p, setup.q, setup.r, setup.gamma);
    match (setup.kind, prep) {
        (InequalityKind::HLS, _) => {
            let (f, k) = (sample(&fields[0]), sample(&fields[1]));
            let conv = riesz_convolve(&k, d, n, h, g);
            let lhs = f.iter().zip(&conv).map(|(a, b)| a * b).sum::<f64>() * cell;
            (lhs, lp_norm(&f, cell, p) * lp_norm(&k, cell, r))
        }
        (InequalityKind::EndpointHLS, _) => {
            let f = sample(&fields[0]);
            let origin = lattice_origin_weight(d, g, 0.5) * h.powf(d as f64 + g);
            let mut lhs = 0.0;
            for (flat, v) in f.iter().enumerate() {
                let mut rem = flat;
                let mut r2 = 0.0;
                for _ in 0..d {
                    let x = -setup.l + (rem % n) as f64 * h;
                    r2 += x * x;
                    rem /= n;
                }
                lhs += if r2 < 0.25 * h * h { origin * v.abs() } else { r2.sqrt().powf(g) * v.abs() * cell };
            }
            let inv = 1.0 / p - 1.0 / q;
            let tp = ((q - 1.0) / q + g / d as f64) / inv;
            let tq = (-g / d as f64 - (p - 1.0) / p) / inv;
            (lhs, lp_norm(&f, cell, p).powf(tp) * lp_norm(&f, cell, q).powf(tq))
        }
        (InequalityKind::QGainLr, Prepared::Collision(ops)) => {
            let (f, k) = (sample(&fields[0]), sample(&fields[1]));
            let out = ops.gain_slice(&f, &k);
            (lp_norm(&out, cell, r), lp_norm(&f, cell, p) * lp_norm(&k, cell, q))
        }
        (InequalityKind::QLossLr, Prepared::Collision(ops)) => {
            let (f, k) = (sample(&fields[0]), sample(&fields[1]));
            let out = ops.loss_slice(&f, &k);
            (lp_norm(&out, cell, r), lp_norm(&f, cell, p) * lp_norm(&k, cell, q))
        }
        (InequalityKind::QGainL1, Prepared::Collision(ops)) => {
            let (f, k) = (sample(&fields[0]), sample(&fields[1]));
            let out = ops.gain_slice(&f, &k);
            let theta = 1.0 / (d as f64 * (1.0 - 1.0 / p));
            let k1 = lp_norm(&k, cell, 1.0);
            let rhs = lp_norm(&f, cell, 1.0) * k1.powf(1.0 - theta) * lp_norm(&k, cell, p).powf(theta);
            (lp_norm(&out, cell, 1.0), rhs)
        }
        (InequalityKind::FracLeibniz, _) => {
            let (f, k) = (sample(&fields[0]), sample(&fields[1]));
            let prod: Vec<f64> = f.iter().zip(&k).map(|(a, b)| a * b).collect();
            let s = setup.s;
            let lhs = lp_norm(&bessel_potential(&prod, d, n, setup.l, s), cell, r);
            let rhs = lp_norm(&bessel_potential(&f, d, n, setup.l, s), cell, p) * lp_norm(&k, cell, q)
                + lp_norm(&f, cell, p) * lp_norm(&bessel_potential(&k, d, n, setup.l, s), cell, q);
            (lhs, rhs)
        }
        (InequalityKind::Strichartz, _) => strichartz_sides(setup, &fields[0]),
        (InequalityKind::QGainHalfHalf, Prepared::HalfHalf { sphere, eta }) => {
            half_half_sides(setup, sphere, eta, &fields[0], &fields[1])
        }
        _ => unreachable!("operator prepared for another kind"),
    }
}

/// Both sides of the inequality for explicit inputs.
pub fn inequality_sides(setup: &InequalitySetup, fields: &[Mixture]) -> Result<(f64, f64)> {
    setup.validate()?;
    if fields.len() != setup.kind.arity() {
        return Err(Error::Parameter(format!(
            "{} takes {} inputs, got {}",
            setup.kind.name(),
            setup.kind.arity(),
            fields.len()
        )));
    }
    let prep = prepare(setup)?;
    Ok(sides(setup, &prep, fields))
}

/// Trial `i` draws its inputs from the ChaCha8 stream `i` of `seed`.
pub fn trial_inputs(setup: &InequalitySetup, seed: u64, trial: u64) -> Vec<Mixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    let dim = if setup.kind == InequalityKind::Strichartz { 2 * setup.d } else { setup.d };
    (0..setup.kind.arity()).map(|_| setup.family.draw(dim, &mut rng)).collect()
}

pub fn check_inequality(setup: &InequalitySetup, trials: usize, seed: u64) -> Result<InequalityReport> {
    setup.validate()?;
    let prep = prepare(setup)?;
    let ratios: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let fields = trial_inputs(setup, seed, t);
            let (lhs, rhs) = sides(setup, &prep, &fields);
            if rhs > 0.0 {
                lhs / rhs
            } else {
                0.0
            }
        })
        .collect();
    let worst = ratios.iter().fold(0.0f64, |m, &x| m.max(x));
    if !worst.is_finite() {
        return Err(Error::Divergence {
            message: format!("{} produced a non-finite ratio", setup.kind.name()),
            history: ratios,
        });
    }
    Ok(InequalityReport { kind: setup.kind, trials, worst_ratio: worst, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn gaussian_l2(dim: usize, width: f64) -> f64 {
        (PI * width * width).powf(dim as f64 / 4.0)
    }

    fn disc() -> Mixture {
        Mixture { components: vec![Bump { center: vec![0.0, 0.0], width: 1.0, amplitude: 1.0, ball: true }] }
    }

    #[test]
    fn exponent_relations_are_enforced() {
        for kind in InequalityKind::ALL {
            default_setup(kind).validate().unwrap();
        }
        let mut s = default_setup(InequalityKind::HLS);
        s.p = 1.5;
        assert!(matches!(s.validate(), Err(Error::Exponent(m)) if m.contains("1/p + 1/r")));
        let mut s = default_setup(InequalityKind::QLossLr);
        s.p = 1.5;
        s.q = 1.5;
        s.r = 1.0 / (1.0 / 1.5 + 1.0 / 1.5 - 1.0 + 0.25);
        assert!(matches!(s.validate(), Err(Error::Exponent(m)) if m.contains("p > r")));
        let mut s = default_setup(InequalityKind::Strichartz);
        s.p = 3.0;
        assert!(matches!(s.validate(), Err(Error::Exponent(_))));
    }

    #[test]
    fn riesz_convolution_matches_direct_sum() {
        let (d, n, l, g) = (2, 16, 2.0, -0.5);
        let h = 2.0 * l / n as f64;
        let m = Mixture {
            components: vec![Bump { center: vec![0.1, -0.2], width: 0.4, amplitude: 1.0, ball: false }],
        };
        let vals = m.sample(d, n, l);
        let conv = riesz_convolve(&vals, d, n, h, g);
        let origin = lattice_origin_weight(d, g, 0.5) * h.powf(d as f64 + g);
        for &i in &[0usize, 37, 136, 255] {
            let (ia, ib) = ((i / n) as f64, (i % n) as f64);
            let mut want = 0.0;
            for (j, v) in vals.iter().enumerate() {
                let (ja, jb) = ((j / n) as f64, (j % n) as f64);
                let r = ((ia - ja).powi(2) + (ib - jb).powi(2)).sqrt() * h;
                want += v * if r == 0.0 { origin } else { r.powf(g) * h * h };
            }
            assert!((conv[i] - want).abs() < 1e-12 * (1.0 + want.abs()), "{i}");
        }
    }

    #[test]
    fn bilinear_homogeneity() {
        let s = default_setup(InequalityKind::QGainLr);
        let (l1, r1) = inequality_sides(&s, &[disc(), disc()]).unwrap();
        let (l2, r2) = inequality_sides(&s, &[disc().scaled(2.0), disc()]).unwrap();
        assert!((l2 / l1 - 2.0).abs() < 1e-12);
        assert!((r2 / r1 - 2.0).abs() < 1e-12);
        assert!(((l2 / r2) / (l1 / r1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn endpoint_exponents_sum_to_one() {
        // θp + θq = 1 keeps the bound homogeneous of degree one
        let s = default_setup(InequalityKind::EndpointHLS);
        let (l1, r1) = inequality_sides(&s, &[disc()]).unwrap();
        let (l2, r2) = inequality_sides(&s, &[disc().scaled(3.0)]).unwrap();
        assert!((l2 / l1 - 3.0).abs() < 1e-12 && (r2 / r1 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_report() {
        let s = default_setup(InequalityKind::HLS);
        let a = check_inequality(&s, 20, 7).unwrap();
        let b = check_inequality(&s, 20, 7).unwrap();
        assert_eq!(a.worst_ratio.to_bits(), b.worst_ratio.to_bits());
        assert!(a.worst_ratio > 0.0 && a.worst_ratio.is_finite());
        let json = serde_json::to_value(&a).unwrap();
        assert_eq!(json["kind"], "HLS");
        assert_eq!(json["trials"], 20);
    }

    #[test]
    fn strichartz_ratio_stable_under_refinement() {
        // fixed packet, lattice refined at constant box
        let mut s = default_setup(InequalityKind::Strichartz);
        let phi = Mixture {
            components: vec![Bump { center: vec![0.0; 4], width: 1.5, amplitude: 1.0, ball: false }],
        };
        let ratio = |n: usize| {
            let mut t = s.clone();
            t.n = n;
            let (a, b) = inequality_sides(&t, &[phi.clone()]).unwrap();
            a / b
        };
        let (r32, r64) = (ratio(32), ratio(64));
        assert!(((r64 - r32) / r32).abs() < 0.02, "{r32} {r64}");
        s.n = 32;
        let (_, rhs) = inequality_sides(&s, &[phi.clone()]).unwrap();
        // truncation at 2.5 widths removes a small part of the mass
        assert!((rhs / gaussian_l2(4, 1.5) - 1.0).abs() < 0.05);
    }

    #[test]
    fn half_half_finite_on_indicator_pair() {
        let s = default_setup(InequalityKind::QGainHalfHalf);
        let small = Mixture {
            components: vec![Bump { center: vec![0.3, 0.0], width: 0.5, amplitude: 1.0, ball: true }],
        };
        let (lhs, rhs) = inequality_sides(&s, &[small.clone(), small]).unwrap();
        assert!(lhs > 0.0 && rhs > 0.0 && (lhs / rhs).is_finite());
    }
}
