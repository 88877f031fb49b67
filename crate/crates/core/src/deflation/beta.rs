//! The damping exponent `β(t,x,v) = -‖b‖ ∫_t^0 ∫ f_b(t₀,x,u)|u-v|^γ du dt₀`.
//!
//! On the core, the along-profile of every tube equals one and `v` is tiny
//! against `N₂`, so the velocity dependence enters only through smooth
//! weights. Those are tabulated on a `3^d` stencil in `v` and interpolated
//! quadratically; the `(t, x)` dependence is cached per query point.

use std::collections::HashMap;
use std::sync::RwLock;

use super::{along_rule, perp_rule, BumpFamily, Bumps, DeflationParams};
use crate::error::Result;
use crate::field::cutoff_profile;

/// Nodes per composite piece of the inner `u`-rule.
const PIECE: usize = 8;

type Key = (u64, [u64; 3]);

pub struct BetaEngine {
    bumps: Bumps,
    family: BumpFamily,
    gamma: f64,
    b_norm: f64,
    steps: usize,
    /// `(a, w_a·ψ(10|a-N₂|/N₂))`.
    along: Vec<(f64, f64)>,
    /// `(p, w_p·ψ(M|p|))` in frame coordinates.
    perp: Vec<([f64; 2], f64)>,
    /// Stencil half-spacing in `v`.
    stencil: f64,
    /// `W[j][p][s] = Σ_a w_a |a e_j + p - v_s|^γ`.
    weights: Vec<f64>,
    cache: RwLock<HashMap<Key, Vec<f64>>>,
}

fn stencil_len(d: usize) -> usize {
    3usize.pow(d as u32)
}

fn stencil_point(s: usize, d: usize, h: f64) -> [f64; 3] {
    let mut out = [0.0; 3];
    let mut rem = s;
    for a in (0..d).rev() {
        out[a] = (rem % 3) as f64 * h - h;
        rem /= 3;
    }
    out
}

/// Quadratic Lagrange weights at nodes `{-h, 0, h}`.
fn lagrange(y: f64, h: f64) -> [f64; 3] {
    let h2 = h * h;
    [y * (y - h) / (2.0 * h2), (h2 - y * y) / h2, y * (y + h) / (2.0 * h2)]
}

fn kernel_power(r: f64, gamma: f64) -> f64 {
    if gamma == 0.0 {
        1.0
    } else {
        r.powf(gamma)
    }
}

impl BetaEngine {
    pub fn new(p: &DeflationParams, fam: &BumpFamily) -> Result<BetaEngine> {
        p.validate()?;
        let bumps = Bumps::new(p, fam)?;
        let d = p.d;
        let (an, aw) = along_rule(p.n2, PIECE);
        let along: Vec<(f64, f64)> = an
            .iter()
            .zip(&aw)
            .map(|(&a, &w)| (a, w * cutoff_profile(10.0 * (a - p.n2).abs() / p.n2)))
            .filter(|x| x.1 != 0.0)
            .collect();
        let (pn, pw) = perp_rule(p.m, PIECE);
        let mut perp = Vec::new();
        if d == 2 {
            for (&q, &w) in pn.iter().zip(&pw) {
                perp.push(([q, 0.0], w * cutoff_profile(p.m * q.abs())));
            }
        } else {
            for (&q1, &w1) in pn.iter().zip(&pw) {
                for (&q2, &w2) in pn.iter().zip(&pw) {
                    perp.push(([q1, q2], w1 * w2 * cutoff_profile(p.m * (q1 * q1 + q2 * q2).sqrt())));
                }
            }
        }
        perp.retain(|x| x.1 != 0.0);
        let stencil = 2.0 / p.n1;
        let ns = stencil_len(d);
        let mut weights = vec![0.0; fam.len() * perp.len() * ns];
        for j in 0..fam.len() {
            for (ip, (q, _)) in perp.iter().enumerate() {
                for s in 0..ns {
                    let vs = stencil_point(s, d, stencil);
                    let mut acc = 0.0;
                    for &(a, wa) in &along {
                        let u = fam.compose(j, a, &q[..d - 1]);
                        let r = (0..d).map(|i| (u[i] - vs[i]).powi(2)).sum::<f64>().sqrt();
                        acc += wa * kernel_power(r, p.gamma);
                    }
                    weights[(j * perp.len() + ip) * ns + s] = acc;
                }
            }
        }
        Ok(BetaEngine {
            bumps,
            family: fam.clone(),
            gamma: p.gamma,
            b_norm: p.angular.l1_norm(d),
            steps: p.j_schedule,
            along,
            perp,
            stencil,
            weights,
            cache: RwLock::new(HashMap::new()),
        })
    }

    pub fn family(&self) -> &BumpFamily {
        &self.family
    }

    pub fn clear_cache(&self) {
        self.cache.write().unwrap().clear();
    }

    /// Trapezoid nodes and weights on `[t, 0]`.
    fn time_rule(&self, t: f64) -> impl Iterator<Item = (f64, f64)> {
        let n = self.steps;
        let dt = t.abs() / (n - 1) as f64;
        (0..n).map(move |k| {
            let w = if k == 0 || k == n - 1 { 0.5 * dt } else { dt };
            (t * k as f64 / (n - 1) as f64, w)
        })
    }

    /// Whether the stencil path applies at `(t, x, v)`.
    fn on_core(&self, t: f64, x: &[f64], v: &[f64]) -> bool {
        let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
        r + 1.2 * self.bumps.n2 * t.abs() <= self.bumps.n2 && v.iter().all(|c| c.abs() <= self.stencil)
    }

    /// `β(t, x, v)`; zero at `t = 0`, nonpositive for `t < 0`.
    pub fn beta(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        if !self.on_core(t, x, v) {
            return self.beta_direct(t, x, v);
        }
        let d = self.bumps.d;
        let mut key = (t.to_bits(), [0u64; 3]);
        for i in 0..d {
            key.1[i] = x[i].to_bits();
        }
        let cached = self.cache.read().unwrap().get(&key).cloned();
        let table = match cached {
            Some(tab) => tab,
            None => {
                let tab = self.stencil_sums(t, x);
                self.cache.write().unwrap().insert(key, tab.clone());
                tab
            }
        };
        let lag: Vec<[f64; 3]> = (0..d).map(|i| lagrange(v[i], self.stencil)).collect();
        let mut acc = 0.0;
        for (s, b) in table.iter().enumerate() {
            let mut rem = s;
            let mut w = 1.0;
            for a in (0..d).rev() {
                w *= lag[a][rem % 3];
                rem /= 3;
            }
            acc += w * b;
        }
        -self.b_norm * self.bumps.amplitude * acc
    }

    /// `Σ_{j,p} w_p ∫_t^0 ψ(M|P⊥_j x - p t₀|) dt₀ · W[j][p][s]` for every stencil node.
    fn stencil_sums(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let d = self.bumps.d;
        let ns = stencil_len(d);
        let np = self.perp.len();
        let m = self.bumps.m;
        let times: Vec<(f64, f64)> = self.time_rule(t).collect();
        let mut out = vec![0.0; ns];
        for j in 0..self.family.len() {
            let q = self.family.perp(j, x);
            for (ip, (p, wp)) in self.perp.iter().enumerate() {
                let mut a = 0.0;
                for &(t0, wt) in &times {
                    let r2 = (q[0] - p[0] * t0).powi(2) + (q[1] - p[1] * t0).powi(2);
                    a += wt * cutoff_profile(m * r2.sqrt());
                }
                if a == 0.0 {
                    continue;
                }
                let row = &self.weights[(j * np + ip) * ns..(j * np + ip + 1) * ns];
                for (o, w) in out.iter_mut().zip(row) {
                    *o += wp * a * w;
                }
            }
        }
        out
    }

    /// `‖b‖ ∫ f_b(t, x, u) |u - v|^γ du` by product quadrature over every sector.
    pub fn loss_rate(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        let d = self.bumps.d;
        let mut acc = 0.0;
        for j in 0..self.family.len() {
            for (p, wp) in &self.perp {
                for &(a, wa) in &self.along {
                    let u = self.family.compose(j, a, &p[..d - 1]);
                    let mut y = [0.0; 3];
                    let mut r2 = 0.0;
                    for i in 0..d {
                        y[i] = x[i] - u[i] * t;
                        r2 += (u[i] - v[i]).powi(2);
                    }
                    if r2 == 0.0 {
                        continue;
                    }
                    let k = self.bumps.spatial_bump(j, &y[..d]);
                    if k != 0.0 {
                        acc += wp * wa * k * kernel_power(r2.sqrt(), self.gamma);
                    }
                }
            }
        }
        self.b_norm * self.bumps.amplitude * acc
    }

    /// Nested quadrature without the core simplifications.
    pub fn beta_direct(&self, t: f64, x: &[f64], v: &[f64]) -> f64 {
        if t == 0.0 {
            return 0.0;
        }
        -self.time_rule(t).map(|(t0, w)| w * self.loss_rate(t0, x, v)).sum::<f64>()
    }
}
