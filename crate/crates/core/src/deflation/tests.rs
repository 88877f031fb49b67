use super::*;
use crate::collision::{sphere_quadrature, VelocityOps};
use crate::field::{DenseField, Grid, VelocityGrid};
use crate::norms::sobolev_norm;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;

fn desk() -> (DeflationParams, BumpFamily) {
    let p = DeflationParams::default();
    let fam = sphere_points(p.d, p.j).unwrap();
    (p, fam)
}

fn small() -> DeflationParams {
    DeflationConfig { m: Some(2.0), n2: Some(4.0), n1: Some(16.0), ..Default::default() }.resolve()
}

#[test]
fn default_schedule() {
    let p = DeflationParams::default();
    assert_eq!((p.d, p.m, p.n2, p.n1), (2, 4.0, 8.0, 32.0));
    assert_eq!(p.r0, 0.0);
    assert_eq!(p.j, 40);
    assert!((p.t_star + 0.2 * 4f64.powf(-0.05)).abs() < 1e-15);
    p.validate().unwrap();
    assert_eq!(densest_disjoint(2, 8.0, 16.0), 160);
}

#[test]
fn params_json_names() {
    let p = DeflationParams::default();
    let s = serde_json::to_string(&p).unwrap();
    for key in ["\"M\"", "\"N1\"", "\"N2\"", "\"J\"", "\"T_star\"", "\"j_schedule\""] {
        assert!(s.contains(key), "{s}");
    }
    let back: DeflationParams = serde_json::from_str(&s).unwrap();
    assert_eq!(back, p);
}

#[test]
fn invalid_params_rejected() {
    let base = DeflationParams::default();
    let cases = [
        DeflationParams { n1: 4.0, ..base.clone() },
        DeflationParams { m: 1.5, ..base.clone() },
        DeflationParams { r0: 0.3, ..base.clone() },
        DeflationParams { s: 0.6, ..base.clone() },
        DeflationParams { s0: 0.5, ..base.clone() },
        DeflationParams { t_star: -0.3, ..base.clone() },
        DeflationParams { t_star: 0.0, ..base.clone() },
        DeflationParams { j: 100, ..base.clone() },
        DeflationParams { j: 3, ..base.clone() },
        DeflationParams { j_schedule: 1, ..base.clone() },
    ];
    for c in cases {
        assert!(matches!(c.validate(), Err(Error::Parameter(_))), "{c:?}");
    }
    let bad_gamma = DeflationParams { gamma: -3.0, ..base };
    let msg = bad_gamma.validate().unwrap_err().to_string();
    assert!(msg.contains("-(d-1)/2"), "{msg}");
}

#[test]
fn four_points_on_circle() {
    let fam = sphere_points(2, 4).unwrap();
    let want = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]];
    for (e, w) in fam.points.iter().zip(&want) {
        assert!((e[0] - w[0]).abs() < 1e-15 && (e[1] - w[1]).abs() < 1e-15, "{e:?}");
    }
    assert!((fam.min_angle - PI / 2.0).abs() < 1e-15);
}

#[test]
fn fibonacci_spacing() {
    let fam = sphere_points(3, 100).unwrap();
    let scale = (4.0 * PI / 100.0).sqrt();
    assert!(fam.min_angle >= 0.5 * scale && fam.min_angle <= 2.0 * scale, "{}", fam.min_angle);
    for e in &fam.points {
        assert!((norm(e) - 1.0).abs() < 1e-14);
    }
    // Frames are orthonormal with the point in row 0.
    for (e, f) in fam.points.iter().zip(&fam.frames) {
        for a in 0..3 {
            for b in 0..3 {
                let g = dot(&f[3 * a..3 * a + 3], &f[3 * b..3 * b + 3]);
                assert!((g - if a == b { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        assert_eq!(&f[..3], &e[..]);
    }
    assert!(matches!(sphere_points(2, 3), Err(Error::Parameter(_))));
}

#[test]
fn spacing_constant_recorded() {
    let (p, fam) = desk();
    let c = fam.spacing_constant(&p);
    assert!(c > 1.0 && c < 10.0, "{c}");
}

#[test]
fn bumps_vanish_off_shell() {
    let (p, fam) = desk();
    let fb = build_fb(&p, &fam, p.t_star).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // The along factor confines |v| > 0.8 N₂; the perpendicular width adds a corner.
    let outer = ((1.2 * p.n2).powi(2) + (2.0 / p.m).powi(2)).sqrt();
    let mut hits = 0;
    for _ in 0..20000 {
        let r = rng.random_range(0.0..1.5 * p.n2);
        let th = rng.random_range(0.0..2.0 * PI);
        let v = [r * th.cos(), r * th.sin()];
        let x = [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)];
        let val = fb.value(&x, &v);
        assert!(val >= 0.0);
        if r <= 0.8 * p.n2 || r >= outer {
            assert_eq!(val, 0.0, "{r}");
        } else if val > 0.0 {
            hits += 1;
        }
    }
    assert!(hits > 0);
}

#[test]
fn bumps_follow_characteristics() {
    let (p, fam) = desk();
    let b = Bumps::new(&p, &fam).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let t = rng.random_range(p.t_star..0.0);
        let j = rng.random_range(0..fam.len());
        let v = fam.compose(j, rng.random_range(0.85..1.15) * p.n2, &[rng.random_range(-1.5..1.5) / p.m]);
        let x0 = fam.compose(j, rng.random_range(-1.5..1.5) * p.n2, &[rng.random_range(-1.5..1.5) / p.m]);
        let x = [x0[0] + v[0] * t, x0[1] + v[1] * t];
        let back = [x[0] - v[0] * t, x[1] - v[1] * t];
        assert!((b.eval(t, &x, &v) - b.eval(0.0, &back, &v)).abs() <= 1e-12 * b.amplitude);
    }
}

/// `∫ ⟨k⟩^{2s} |K̂(k)|² dk/(2π)²` for a separable `K = K₁(x₁)K₂(x₂)` from
/// one-dimensional FFTs on long periods.
fn separable_sobolev_sq(k1: impl Fn(f64) -> f64, h1: f64, l1: f64, k2: impl Fn(f64) -> f64, h2: f64, l2: f64, s: f64) -> f64 {
    let spectrum = |k: &dyn Fn(f64) -> f64, h: f64, l: f64| -> (Vec<f64>, Vec<f64>) {
        let n = (l / h).round() as usize;
        let mut buf: Vec<Complex64> = (0..n).map(|i| Complex64::new(k(-l / 2.0 + i as f64 * h), 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let freq = (0..n)
            .map(|i| {
                let m = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
                2.0 * PI * m / (n as f64 * h)
            })
            .collect();
        (freq, buf.iter().map(|c| (c.norm() * h).powi(2) / (n as f64 * h)).collect())
    };
    let (f1, p1) = spectrum(&k1, h1, l1);
    let (f2, p2) = spectrum(&k2, h2, l2);
    let mut acc = 0.0;
    for (a, pa) in f1.iter().zip(&p1) {
        for (b, pb) in f2.iter().zip(&p2) {
            acc += (1.0 + a * a + b * b).powf(s) * pa * pb;
        }
    }
    acc
}

#[test]
fn bump_norm_matches_separable_oracle() {
    let (p, fam) = desk();
    let got = sobolev_norm(&build_fb(&p, &fam, 0.0).unwrap(), p.s0, p.r0).unwrap();
    // Disjoint velocity supports and rotation symmetry: J copies of one tube.
    let (m, n2) = (p.m, p.n2);
    let k_sq = separable_sobolev_sq(
        |x| cutoff_profile(x.abs() / n2),
        n2 / 64.0,
        4.0 * n2 + 24.0,
        |x| cutoff_profile(m * x.abs()),
        1.0 / (64.0 * m),
        2.0 / m + 24.0,
        p.s0,
    );
    let midpoint = |f: &dyn Fn(f64) -> f64, lo: f64, hi: f64| {
        let n = 4000;
        let h = (hi - lo) / n as f64;
        (0..n).map(|i| f(lo + (i as f64 + 0.5) * h)).sum::<f64>() * h
    };
    assert_eq!(p.r0, 0.0);
    let along = midpoint(&|a| cutoff_profile(10.0 * (a - n2).abs() / n2).powi(2), 0.8 * n2, 1.2 * n2);
    let perp = midpoint(&|q| cutoff_profile(m * q.abs()).powi(2), -2.0 / m, 2.0 / m);
    let want = p.bump_amplitude() * (p.j as f64 * k_sq * along * perp).sqrt();
    assert!((got - want).abs() < 1e-3 * want, "{got} {want}");
}

#[test]
fn bump_norm_uniform_in_time() {
    let p = small();
    let fam = sphere_points(p.d, p.j).unwrap();
    let n0 = sobolev_norm(&build_fb(&p, &fam, 0.0).unwrap(), p.s0, p.r0).unwrap();
    for t in [p.t_star / 2.0, p.t_star] {
        let n = sobolev_norm(&build_fb(&p, &fam, t).unwrap(), p.s0, p.r0).unwrap();
        assert!((n - n0).abs() < 1e-2 * n0, "{t} {n} {n0}");
    }
}

fn core_points(p: &DeflationParams, count: usize, seed: u64) -> Vec<([f64; 2], [f64; 2])> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let x = [rng.random_range(-1.0..1.0) / p.m, rng.random_range(-1.0..1.0) / p.m];
            let v = [rng.random_range(-1.0..1.0) / p.n1, rng.random_range(-1.0..1.0) / p.n1];
            (x, v)
        })
        .collect()
}

#[test]
fn damping_sign_and_monotonicity() {
    let (p, fam) = desk();
    let e = BetaEngine::new(&p, &fam).unwrap();
    let times: Vec<f64> = (0..6).map(|k| p.t_star * k as f64 / 5.0).collect();
    for (x, v) in core_points(&p, 15, 5) {
        assert_eq!(e.beta(0.0, &x, &v), 0.0);
        let mut last = 0.0;
        for &t in &times[1..] {
            let b = e.beta(t, &x, &v);
            assert!(b <= last, "{t} {b} {last}");
            last = b;
        }
    }
    // Off the core the direct quadrature is used.
    for x in [[3.0, 0.5], [0.2, -7.0]] {
        let b = e.beta(p.t_star, &x, &[0.5, 0.1]);
        assert!(b <= 0.0);
    }
}

#[test]
fn stencil_path_matches_direct_quadrature() {
    let (p, fam) = desk();
    let e = BetaEngine::new(&p, &fam).unwrap();
    for (x, v) in core_points(&p, 8, 6) {
        for t in [p.t_star, 0.3 * p.t_star] {
            let (fast, slow) = (e.beta(t, &x, &v), e.beta_direct(t, &x, &v));
            assert!((fast - slow).abs() < 1e-5 * slow.abs(), "{fast} {slow}");
        }
    }
}

#[test]
fn damping_bounds_uniform_in_m() {
    // |∇ₓᵏ β| ≤ C |t| M^{k+1/2-s} on the core, one C per k for M = 4 and 8.
    let ratios = |m: f64| {
        let p = DeflationConfig { m: Some(m), ..Default::default() }.resolve();
        let fam = sphere_points(p.d, p.j).unwrap();
        let e = BetaEngine::new(&p, &fam).unwrap();
        let mut best = [0.0f64; 3];
        for t in [p.t_star, 0.5 * p.t_star] {
            for (x, v) in core_points(&p, 12, 7) {
                let b = |dx: f64, dy: f64| e.beta(t, &[x[0] + dx, x[1] + dy], &v);
                let b0 = b(0.0, 0.0);
                let h = 1e-3 / m;
                let grad = ((b(h, 0.0) - b(-h, 0.0)) / (2.0 * h)).hypot((b(0.0, h) - b(0.0, -h)) / (2.0 * h));
                let h = 1e-2 / m;
                let hxx = (b(h, 0.0) - 2.0 * b0 + b(-h, 0.0)) / (h * h);
                let hyy = (b(0.0, h) - 2.0 * b0 + b(0.0, -h)) / (h * h);
                let hxy = (b(h, h) - b(h, -h) - b(-h, h) + b(-h, -h)) / (4.0 * h * h);
                let hess = (hxx * hxx + hyy * hyy + 2.0 * hxy * hxy).sqrt();
                let unit = t.abs() * p.damping_scale();
                for (k, val) in [b0.abs(), grad, hess].into_iter().enumerate() {
                    best[k] = best[k].max(val / (unit * m.powi(k as i32)));
                }
            }
        }
        best
    };
    let c = ratios(4.0);
    let finer = ratios(8.0);
    for k in 0..3 {
        assert!(c[k].is_finite() && c[k] > 0.0 && c[k] < 20.0, "{c:?}");
        assert!(finer[k] <= 1.25 * c[k], "k = {k}: {finer:?} vs {c:?}");
    }
}

#[test]
fn core_starts_undamped_and_grows() {
    let (p, fam) = desk();
    let e = Arc::new(BetaEngine::new(&p, &fam).unwrap());
    let f0 = build_fr(&p, &e, 0.0).unwrap();
    let ft = build_fr(&p, &e, p.t_star).unwrap();
    let amp = p.core_amplitude();
    for (x, v) in core_points(&p, 40, 8) {
        let sx = [p.m * x[0], p.m * x[1]];
        let sv = [p.n1 * v[0], p.n1 * v[1]];
        let want = amp * smooth_cutoff(&sx) * smooth_cutoff(&sv);
        assert!((f0.value(&x, &v) - want).abs() <= 1e-14 * amp);
        assert!(ft.value(&x, &v) >= f0.value(&x, &v));
    }
    assert!(matches!(build_fr(&p, &e, 2.0 * p.t_star), Err(Error::Parameter(_))));
}

#[test]
fn core_decays_at_loss_rate() {
    // ∂ₜ f_r = -f_r ∫ ‖b‖ f_b(t,x,u)|u-v|^γ du, with the integral from the collision module.
    let (p, fam) = desk();
    let e = Arc::new(BetaEngine::new(&p, &fam).unwrap());
    let b = Bumps::new(&p, &fam).unwrap();
    let vg = VelocityGrid { d: 2, n: 512, l: 10.0 };
    let kernel = CollisionKernel::power_law(p.gamma, p.angular);
    let ops = VelocityOps::new(vg, &kernel, &sphere_quadrature(2, 16).unwrap()).unwrap();
    let t = 0.5 * p.t_star;
    let dt = 1e-4;
    let (fm, fp, fc) =
        (build_fr(&p, &e, t - dt).unwrap(), build_fr(&p, &e, t + dt).unwrap(), build_fr(&p, &e, t).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let x = [rng.random_range(-1.0..1.0) / p.m, rng.random_range(-1.0..1.0) / p.m];
        let v = [rng.random_range(-1.5..1.5) / p.n1, rng.random_range(-1.5..1.5) / p.n1];
        let g: Vec<f64> = (0..vg.len()).map(|iu| b.eval(t, &x, &vg.point(iu))).collect();
        let rate = ops.loss_rate_at(&g, &v);
        let lhs = (fp.value(&x, &v) - fm.value(&x, &v)) / (2.0 * dt);
        let rhs = -fc.value(&x, &v) * rate;
        assert!((lhs - rhs).abs() <= 1e-2 * rhs.abs(), "{x:?} {v:?}: {lhs} {rhs}");
    }
}

#[test]
fn composite_parts_are_orthogonal() {
    let p = small();
    let fam = sphere_points(p.d, p.j).unwrap();
    let e = Arc::new(BetaEngine::new(&p, &fam).unwrap());
    let t = p.t_star;
    let na = sobolev_norm(&build_fa(&p, &e, t).unwrap(), p.s0, p.r0).unwrap();
    let nr = sobolev_norm(&build_fr(&p, &e, t).unwrap(), p.s0, p.r0).unwrap();
    let nb = sobolev_norm(&build_fb(&p, &fam, t).unwrap(), p.s0, p.r0).unwrap();
    assert!((na * na - nr * nr - nb * nb).abs() <= 1e-10 * na * na);
}

#[test]
fn composite_is_nonnegative() {
    let p = small();
    let fam = sphere_points(p.d, p.j).unwrap();
    let e = Arc::new(BetaEngine::new(&p, &fam).unwrap());
    let fa = build_fa(&p, &e, p.t_star / 2.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..3000 {
        let x = [rng.random_range(-12.0..12.0), rng.random_range(-12.0..12.0)];
        let r = rng.random_range(0.0..6.0);
        let th = rng.random_range(0.0..2.0 * PI);
        let v = if r < 1.0 { [r / p.n1, 0.3 * r / p.n1] } else { [r * th.cos(), r * th.sin()] };
        assert!(fa.value(&x, &v) >= 0.0);
    }
}

#[test]
fn supports_disjoint_for_admissible_params() {
    for d in [2usize, 3] {
        for m in [2.0, 3.0, 4.0, 16.0] {
            for n2 in [m, 2.0 * m, 8.0 * m] {
                for n1 in [n2, 4.0 * n2] {
                    let s = if d == 2 { 0.45 } else { 0.9 };
                    let p = DeflationConfig { d: Some(d), m: Some(m), n2: Some(n2), n1: Some(n1), s: Some(s), ..Default::default() }
                        .resolve();
                    p.validate().unwrap();
                    assert!(2.0 / p.n1 < 0.8 * p.n2);
                }
            }
        }
    }
}

fn dense_scale() -> (DeflationParams, Arc<BetaEngine>, Grid) {
    let p = DeflationConfig { m: Some(2.0), n2: Some(2.0), n1: Some(2.0), ..Default::default() }.resolve();
    let fam = sphere_points(p.d, p.j).unwrap();
    let e = Arc::new(BetaEngine::new(&p, &fam).unwrap());
    (p, e, Grid::new(2, 16, 5.5, 16, 4.0).unwrap())
}

#[test]
fn error_term_without_core_is_bump_collision() {
    let (p, e, grid) = dense_scale();
    let fb = sample(&build_fb(&p, e.family(), p.t_star).unwrap(), &grid);
    let zero = DenseField::zeros(&grid);
    let ops = error_term::velocity_ops(&p, &grid).unwrap();
    let terms = error_terms_from_parts(&zero, &fb, &ops);
    let want = terms.loss[2].axpy(-1.0, &terms.gain[3]);
    assert!(terms.total().axpy(-1.0, &want).max_abs() == 0.0);
    assert!(want.max_abs() > 0.0);
}

#[test]
fn error_term_needs_cover() {
    let (p, e, _) = dense_scale();
    let short = Grid::new(2, 16, 3.0, 16, 4.0).unwrap();
    assert!(matches!(assemble_f_err(&p, &e, p.t_star, &short), Err(Error::Grid(_))));
    let grid = Grid::new(2, 16, 5.5, 16, 4.0).unwrap();
    assert!(matches!(
        f_err_time_derivative_form(&p, &e, p.t_star, &grid, 1e-3),
        Err(Error::Span(_))
    ));
}

#[test]
fn ratio_grows_with_window() {
    let p = small();
    let fam = sphere_points(p.d, p.j).unwrap();
    let norm = NormSpec::Sobolev { s: p.s0, r: p.r0 };
    let mut last = 1.0;
    for t_star in [-0.05, -0.1, -0.2] {
        let q = DeflationParams { t_star, ..p.clone() };
        let rep = deflation_experiment(&q, &fam, &norm, 2).unwrap();
        assert!(rep.ratio > last, "{t_star}: {} <= {last}", rep.ratio);
        last = rep.ratio;
    }
}

#[test]
fn report_csv_layout() {
    let p = small();
    let fam = sphere_points(p.d, p.j).unwrap();
    let rep = deflation_experiment(&p, &fam, &NormSpec::Sobolev { s: p.s0, r: p.r0 }, 3).unwrap();
    let csv = rep.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,norm_fa,norm_fr,norm_fb");
    assert_eq!(lines.len(), 4);
    assert_eq!(rep.times[0], p.t_star);
    assert_eq!(rep.times[2], 0.0);
    assert!(rep.ratio > 1.0);
    let js = rep.summary();
    assert_eq!(js["ratio"].as_f64().unwrap(), rep.ratio);
}
