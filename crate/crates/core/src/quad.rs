//! Gaussian rules and lattice-sum corrections shared by the collision and norm code.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Mutex;

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::function::gamma::{gamma, ln_gamma};

/// Golub–Welsch: nodes and weights from a symmetric Jacobi matrix.
fn golub_welsch(diag: &[f64], off: &[f64], mu0: f64) -> (Vec<f64>, Vec<f64>) {
    let n = diag.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = diag[i];
        if i + 1 < n {
            m[(i, i + 1)] = off[i];
            m[(i + 1, i)] = off[i];
        }
    }
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mu0 * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let diag = vec![0.0; n];
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            k / (4.0 * k * k - 1.0).sqrt()
        })
        .collect();
    golub_welsch(&diag, &off, 2.0)
}

/// Gauss–Legendre rule with `per_piece` nodes on each interval between
/// consecutive `breaks`.
pub fn composite_legendre(breaks: &[f64], per_piece: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_legendre(per_piece);
    let mut nodes = Vec::with_capacity(per_piece * breaks.len());
    let mut weights = Vec::with_capacity(per_piece * breaks.len());
    for pair in breaks.windows(2) {
        let (mid, half) = ((pair[0] + pair[1]) / 2.0, (pair[1] - pair[0]) / 2.0);
        for (xi, wi) in x.iter().zip(&w) {
            nodes.push(mid + half * xi);
            weights.push(half * wi);
        }
    }
    (nodes, weights)
}

/// Gauss–Jacobi rule on `[-1, 1]` for the weight `(1-x)^a (1+x)^b`, `a, b > -1`.
pub fn gauss_jacobi(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    let ab = a + b;
    let diag: Vec<f64> = (0..n)
        .map(|k| {
            let k = k as f64;
            if k == 0.0 {
                (b - a) / (ab + 2.0)
            } else {
                (b * b - a * a) / ((2.0 * k + ab) * (2.0 * k + ab + 2.0))
            }
        })
        .collect();
    let off: Vec<f64> = (1..n)
        .map(|k| {
            let k = k as f64;
            let s = 2.0 * k + ab;
            (4.0 * k * (k + a) * (k + b) * (k + ab) / (s * s * (s + 1.0) * (s - 1.0))).sqrt()
        })
        .collect();
    let mu0 = ((ab + 1.0) * 2f64.ln() + ln_gamma(a + 1.0) + ln_gamma(b + 1.0) - ln_gamma(ab + 2.0)).exp();
    golub_welsch(&diag, &off, mu0)
}

/// Rule for `∫_0^R r^p F(r) dr`, `p > -1`.
pub fn radial_rule(n: usize, radius: f64, p: f64) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_jacobi(n, 0.0, p);
    let scale = (radius / 2.0).powf(p + 1.0);
    let r = x.iter().map(|&t| radius * (1.0 + t) / 2.0).collect();
    (r, w.iter().map(|&wi| wi * scale).collect())
}

/// Surface measure of the unit sphere in `R^d`.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma(d as f64 / 2.0)
}

/// Neumaier-compensated running sum.
#[derive(Default, Clone, Copy)]
pub struct Compensated {
    sum: f64,
    carry: f64,
}

impl Compensated {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn total(&self) -> f64 {
        self.sum + self.carry
    }
}

fn gaussian_defect(d: usize, gamma_exp: f64, eps: f64, s: f64) -> f64 {
    // ∫|y|^γ e^{-|y|²/2s²} dy minus the lattice sum over |j| ≥ eps.
    let a = d as f64 + gamma_exp;
    let integral = sphere_area(d) * 0.5 * (2.0 * s * s).powf(a / 2.0) * gamma(a / 2.0);
    let reach = (9.0 * s).ceil() as i64;
    let inv = 1.0 / (2.0 * s * s);
    let mut sum = Compensated::default();
    let one_d: Vec<f64> = (-reach..=reach).map(|j| ((j * j) as f64 * -inv).exp()).collect();
    let r2_of = |j: i64| (j * j) as f64;
    match d {
        1 => {
            for j in -reach..=reach {
                let r = r2_of(j).sqrt();
                if r >= eps && j != 0 {
                    sum.add(r.powf(gamma_exp) * one_d[(j + reach) as usize]);
                }
            }
        }
        2 => {
            for i in -reach..=reach {
                for j in -reach..=reach {
                    let r2 = r2_of(i) + r2_of(j);
                    if r2 > 0.0 && r2.sqrt() >= eps {
                        sum.add(
                            r2.powf(gamma_exp / 2.0)
                                * one_d[(i + reach) as usize]
                                * one_d[(j + reach) as usize],
                        );
                    }
                }
            }
        }
        _ => {
            for i in -reach..=reach {
                let wi = one_d[(i + reach) as usize];
                for j in -reach..=reach {
                    let wij = wi * one_d[(j + reach) as usize];
                    if wij < 1e-300 {
                        continue;
                    }
                    for k in -reach..=reach {
                        let r2 = r2_of(i) + r2_of(j) + r2_of(k);
                        if r2 > 0.0 && r2.sqrt() >= eps {
                            sum.add(r2.powf(gamma_exp / 2.0) * wij * one_d[(k + reach) as usize]);
                        }
                    }
                }
            }
        }
    }
    integral - sum.total()
}

static ORIGIN_WEIGHTS: Mutex<Option<HashMap<(usize, u64, u64), f64>>> = Mutex::new(None);

/// Weight `c` such that `Σ_{|j| ≥ eps} |j|^γ φ(j) + c·φ(0)` reproduces `∫ |y|^γ φ(y) dy`
/// on the unit lattice `Z^d` up to terms of order `∇²φ`. For spacing `h` the
/// weight scales as `c·h^{d+γ}`.
pub fn lattice_origin_weight(d: usize, gamma_exp: f64, eps: f64) -> f64 {
    let key = (d, gamma_exp.to_bits(), eps.to_bits());
    if let Some(map) = ORIGIN_WEIGHTS.lock().unwrap().as_ref() {
        if let Some(&c) = map.get(&key) {
            return c;
        }
    }
    // Defect(S) = c + a₁/S² + a₂/S⁴ + …; two Richardson steps.
    let s = if d == 3 { 4.0 } else { 8.0 };
    let e1 = gaussian_defect(d, gamma_exp, eps, s);
    let e2 = gaussian_defect(d, gamma_exp, eps, 2.0 * s);
    let e3 = gaussian_defect(d, gamma_exp, eps, 4.0 * s);
    let r1 = (4.0 * e2 - e1) / 3.0;
    let r2 = (4.0 * e3 - e2) / 3.0;
    let c = (16.0 * r2 - r1) / 15.0;
    ORIGIN_WEIGHTS.lock().unwrap().get_or_insert_with(HashMap::new).insert(key, c);
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(6);
        let s: f64 = w.iter().sum();
        assert!((s - 2.0).abs() < 1e-13);
        let m10: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(10)).sum();
        assert!((m10 - 2.0 / 11.0).abs() < 1e-13);
    }

    #[test]
    fn jacobi_matches_closed_moments() {
        // ∫_{-1}^{1} (1+x)^b x^k dx against a fine Legendre rule after substitution.
        let b = -0.5;
        let (x, w) = gauss_jacobi(8, 0.0, b);
        let mass: f64 = w.iter().sum();
        // ∫ (1+x)^b dx = 2^{b+1}/(b+1)
        assert!((mass - 2f64.powf(b + 1.0) / (b + 1.0)).abs() < 1e-12);
        // ∫ (1+x)^b (1+x)^3 dx = 2^{b+4}/(b+4)
        let m3: f64 = x.iter().zip(&w).map(|(x, w)| w * (1.0 + x).powi(3)).sum();
        assert!((m3 - 2f64.powf(b + 4.0) / (b + 4.0)).abs() < 1e-12);
    }

    #[test]
    fn radial_rule_moment() {
        let (r, w) = radial_rule(10, 3.0, -0.5);
        // ∫_0^3 r^{-1/2} r^2 dr = 3^{2.5}/2.5
        let m: f64 = r.iter().zip(&w).map(|(r, w)| w * r * r).sum();
        assert!((m - 3f64.powf(2.5) / 2.5).abs() < 1e-11);
    }

    #[test]
    fn origin_weight_known_values() {
        // γ = 0: the punctured lattice misses exactly φ(0).
        assert!((lattice_origin_weight(2, 0.0, 0.5) - 1.0).abs() < 1e-9);
        assert!((lattice_origin_weight(3, 0.0, 0.5) - 1.0).abs() < 1e-8);
        // d = 1: c = -2ζ(-γ); ζ(1/2) = -1.4603545088095868.
        let c = lattice_origin_weight(1, -0.5, 0.5);
        assert!((c - 2.0 * 1.4603545088095868).abs() < 1e-7, "{c}");
        // d = 2: c = -4ζ(s)β(s) with s = 1/4 (Epstein zeta of the square lattice).
        // ζ(1/4) = -0.813278405261892, β(1/4) = 0.590723056442495 (Dirichlet beta).
        let c2 = lattice_origin_weight(2, -0.5, 0.5);
        assert!((c2 - 4.0 * 0.813278405261892 * 0.590723056442495).abs() < 1e-7, "{c2}");
    }
}
