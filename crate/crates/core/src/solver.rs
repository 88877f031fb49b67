//! Evolution machinery: exact free transport, Duhamel integration, the damping
//! ODE of the core profile, Picard iteration and the correction solve.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::collision::{map_slices, sphere_quadrature, CollisionKernel, VelocityOps};
use crate::deflation::{
    velocity_ops, build_fa, build_fb, build_fr, check_cover, error_terms_from_parts, sample, BetaEngine, DeflationParams,
};
use crate::error::{Error, Result};
use crate::field::{unflatten, x_multiplier, AnalyticField, DenseField, Grid, PhaseField, SamplePlan};
use crate::norms::z_norm;

/// Dense fields on a uniform, strictly increasing time mesh.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub fields: Vec<DenseField>,
    pub grid: Grid,
}

impl Trajectory {
    pub fn new(times: Vec<f64>, fields: Vec<DenseField>, grid: Grid) -> Result<Trajectory> {
        if times.len() != fields.len() || times.is_empty() {
            return Err(Error::Shape(format!(
                "{} times for {} fields",
                times.len(),
                fields.len()
            )));
        }
        if times.len() > 1 {
            let dt = times[1] - times[0];
            if !(dt > 0.0) {
                return Err(Error::Shape("times must be strictly increasing".into()));
            }
            for w in times.windows(2) {
                if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.abs().max(1.0) {
                    return Err(Error::Shape("time mesh must be uniform".into()));
                }
            }
        }
        if fields.iter().any(|f| f.grid != grid) {
            return Err(Error::GridMismatch("trajectory fields must share one grid".into()));
        }
        Ok(Trajectory { times, fields, grid })
    }

    pub fn dt(&self) -> f64 {
        if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            0.0
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Values below this fraction of a column's peak count as outside its support.
const SUPPORT_FLOOR: f64 = 1e-12;
/// Relative size below which iterate distances are rounding noise.
const ROUNDING: f64 = 1e-13;
/// Iteration cap of the Picard solves.
pub const MAX_PICARD: usize = 25;

/// Errors if shifting the x-support of a dense column by `v t` leaves the box.
/// Columns whose support reaches the box edge are treated as periodic data.
fn check_wraparound(f: &DenseField, t: f64) -> Result<()> {
    let g = &f.grid;
    let (d, n, nv) = (g.d, g.n_x, g.v_len());
    for iv in 0..nv {
        let peak = (0..g.x_len()).fold(0.0f64, |m, ix| m.max(f.values[ix * nv + iv].abs()));
        if peak == 0.0 {
            continue;
        }
        let mut lo = vec![n; d];
        let mut hi = vec![0; d];
        for ix in 0..g.x_len() {
            if f.values[ix * nv + iv].abs() > SUPPORT_FLOOR * peak {
                for (a, &i) in unflatten(ix, n, d).iter().enumerate() {
                    lo[a] = lo[a].min(i);
                    hi[a] = hi[a].max(i);
                }
            }
        }
        let v = g.v_point(iv);
        for a in 0..d {
            if lo[a] == 0 || hi[a] == n - 1 {
                continue;
            }
            let shift = v[a] * t;
            if g.x_coord(lo[a]) + shift < -g.l_x || g.x_coord(hi[a]) + shift > g.x_coord(n - 1) {
                return Err(Error::Wraparound(format!(
                    "shift {shift:.4} along axis {a} at v = {v:?} carries the support past the box [-{l}, {l})",
                    l = g.l_x
                )));
            }
        }
    }
    Ok(())
}

/// Exact free transport `f(x - v t, v)` of a dense field on its periodic box.
fn shift_dense(f: &DenseField, t: f64) -> DenseField {
    if t == 0.0 {
        return f.clone();
    }
    let g = &f.grid;
    let nyquist = PI * g.n_x as f64 / (2.0 * g.l_x);
    // The Nyquist mode is its own mirror image; it is held fixed so the
    // multiplier stays unitary and real-preserving.
    x_multiplier(f, |k, v| {
        let phase: f64 = k
            .iter()
            .zip(v)
            .map(|(a, b)| if (a.abs() - nyquist).abs() < 1e-9 * nyquist { 0.0 } else { a * b })
            .sum();
        Complex64::from_polar(1.0, -phase * t)
    })
}

/// `e^{-t v·∇_x} f`.
pub fn free_transport(f: &PhaseField, t: f64) -> Result<PhaseField> {
    match f {
        PhaseField::Dense(df) => {
            check_wraparound(df, t)?;
            Ok(PhaseField::Dense(shift_dense(df, t)))
        }
        PhaseField::Analytic(a) => {
            let inner = a.clone();
            let d = a.support.x_lo.len();
            let mut support = a.support.clone();
            for i in 0..d {
                let (s1, s2) = (a.support.v_lo[i] * t, a.support.v_hi[i] * t);
                support.x_lo[i] += s1.min(s2);
                support.x_hi[i] += s1.max(s2);
            }
            let field = AnalyticField::new(support, move |x, v| {
                let y: Vec<f64> = x.iter().zip(v).map(|(x, v)| x - v * t).collect();
                inner.eval(&y, v)
            });
            Ok(PhaseField::Analytic(match &a.plan {
                Some(plan) => field.with_plan(shifted_plan(plan, t)),
                None => field,
            }))
        }
    }
}

/// Widens every patch lattice by the spread of `v t` over its velocity nodes,
/// keeping the spacing.
fn shifted_plan(plan: &SamplePlan, t: f64) -> SamplePlan {
    let patches = plan
        .patches
        .iter()
        .map(|p| {
            let d = p.n_x.len();
            let mut out = p.clone();
            for a in 0..d {
                let local = |v: &[f64]| match &p.frame {
                    None => v[a] * t,
                    Some(r) => (0..d).map(|i| r[a * d + i] * v[i]).sum::<f64>() * t,
                };
                let lo = p.v_nodes.iter().map(|v| local(v)).fold(f64::INFINITY, f64::min).min(0.0);
                let hi = p.v_nodes.iter().map(|v| local(v)).fold(f64::NEG_INFINITY, f64::max).max(0.0);
                let h = p.spacing(a);
                let (below, above) = ((-lo / h).ceil() as usize, (hi / h).ceil() as usize);
                out.x_lo[a] -= below as f64 * h;
                out.x_hi[a] += above as f64 * h;
                out.n_x[a] += below + above;
            }
            out
        })
        .collect();
    SamplePlan { patches }
}

/// Index of `t` on the mesh of `traj`, if it is a node.
fn node_of(traj: &Trajectory, t: f64) -> Option<usize> {
    let t0 = traj.times[0];
    let dt = traj.dt();
    if traj.len() == 1 {
        return (t == t0).then_some(0);
    }
    let k = ((t - t0) / dt).round();
    (k >= 0.0 && (k as usize) < traj.len() && (t0 + k * dt - t).abs() <= 1e-9 * dt).then_some(k as usize)
}

/// `∫_{t_lo}^{t_hi} e^{-(t_hi - s) v·∇_x} S(s) ds` by the trapezoid rule on the
/// mesh of `source`; both ends must be mesh nodes.
pub fn duhamel(source: &Trajectory, t_lo: f64, t_hi: f64) -> Result<PhaseField> {
    let (Some(lo), Some(hi)) = (node_of(source, t_lo), node_of(source, t_hi)) else {
        return Err(Error::Span(format!(
            "[{t_lo}, {t_hi}] is not spanned by mesh nodes of [{}, {}]",
            source.times[0],
            source.times[source.len() - 1]
        )));
    };
    if lo > hi {
        return Err(Error::Span(format!("t_lo = {t_lo} exceeds t_hi = {t_hi}")));
    }
    let mut acc = DenseField::zeros(&source.grid);
    if lo == hi {
        return Ok(PhaseField::Dense(acc));
    }
    let dt = source.dt();
    for k in lo..=hi {
        let w = if k == lo || k == hi { 0.5 * dt } else { dt };
        let moved = free_transport(&PhaseField::Dense(source.fields[k].clone()), t_hi - source.times[k])?;
        acc = acc.axpy(w, moved.as_dense()?);
    }
    Ok(PhaseField::Dense(acc))
}

/// The core profile by integrating its damping ODE and by the closed form.
#[derive(Clone, Debug)]
pub struct CoreEvolution {
    pub ode: Trajectory,
    pub closed: Trajectory,
}

/// Integrates `∂_t f_r = -f_r ∫ ‖b‖ f_b(t,x,u)|u-v|^γ du` backward from
/// `f_r(0)` with an exponential integrator whose rate integral uses the
/// trapezoid rule on `times` (ascending, uniform, ending at 0).
pub fn fr_ode_evolve(
    p: &DeflationParams,
    engine: &Arc<BetaEngine>,
    times: &[f64],
    grid: &Grid,
) -> Result<CoreEvolution> {
    p.validate()?;
    let last = *times.last().ok_or_else(|| Error::Span("no times".into()))?;
    if last != 0.0 || times[0] < p.t_star {
        return Err(Error::Span(format!(
            "times must lie in [T_star, 0] = [{}, 0] and end at 0",
            p.t_star
        )));
    }
    let initial = sample(&build_fr(p, engine, 0.0)?, grid);
    let active: Vec<usize> = (0..grid.len()).filter(|&i| initial.values[i] != 0.0).collect();
    let nv = grid.v_len();
    let rates = |t: f64| -> Vec<f64> {
        active
            .par_iter()
            .map(|&i| engine.loss_rate(t, &grid.x_point(i / nv), &grid.v_point(i % nv)))
            .collect()
    };
    let n = times.len();
    let mut fields = vec![initial.clone(); n];
    let mut upper = rates(0.0);
    let mut exponent = vec![0.0; active.len()];
    for k in (0..n - 1).rev() {
        let lower = rates(times[k]);
        let dt = times[k + 1] - times[k];
        let mut f = DenseField::zeros(grid);
        for (a, &i) in active.iter().enumerate() {
            exponent[a] += 0.5 * dt * (lower[a] + upper[a]);
            f.values[i] = initial.values[i] * exponent[a].exp();
        }
        fields[k] = f;
        upper = lower;
    }
    let ode = Trajectory::new(times.to_vec(), fields, grid.clone())?;
    let closed_fields =
        times.iter().map(|&t| Ok(sample(&build_fr(p, engine, t)?, grid))).collect::<Result<Vec<_>>>()?;
    let closed = Trajectory::new(times.to_vec(), closed_fields, grid.clone())?;
    Ok(CoreEvolution { ode, closed })
}

/// Right-hand side of `∂_t f + v·∇_x f = S(k, f)` at mesh node `k`.
pub type Source<'a> = dyn Fn(usize, &DenseField) -> Result<DenseField> + Sync + 'a;

/// One application of the Duhamel map on `nodes` (monotone, uniform; data at
/// `nodes[0]`): `f_k = e^{-(τ_k-τ_0)v·∇} f_start + ∫_{τ_0}^{τ_k} e^{-(τ_k-s)v·∇} S(s, f(s)) ds`
/// with the trapezoid rule. `iterate[0]` is ignored: the start value is fixed.
pub fn duhamel_map(nodes: &[f64], start: &DenseField, source: &Source, iterate: &[DenseField]) -> Result<Vec<DenseField>> {
    let first = source(0, start)?;
    sweep(nodes, start, &first, source, iterate)
}

fn sweep(
    nodes: &[f64],
    start: &DenseField,
    first: &DenseField,
    source: &Source,
    iterate: &[DenseField],
) -> Result<Vec<DenseField>> {
    let n = nodes.len();
    let step = if n > 1 { nodes[1] - nodes[0] } else { 0.0 };
    let mut out = Vec::with_capacity(n);
    let mut integral = DenseField::zeros(&start.grid);
    let mut previous = first.clone();
    out.push(start.clone());
    for k in 1..n {
        let current = source(k, &iterate[k])?;
        // I_k = T(Δ)[I_{k-1} + Δ/2 S_{k-1}] + Δ/2 S_k, by the semigroup law.
        let carried = integral.axpy(0.5 * step, &previous);
        let carried = free_transport(&PhaseField::Dense(carried), step)?.as_dense()?.clone();
        integral = carried.axpy(0.5 * step, &current);
        let free = free_transport(&PhaseField::Dense(start.clone()), nodes[k] - nodes[0])?;
        out.push(free.as_dense()?.axpy(1.0, &integral));
        previous = current;
    }
    Ok(out)
}

fn sup_distance(a: &[DenseField], b: &[DenseField]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.axpy(-1.0, y).l2_norm()).fold(0.0, f64::max)
}

/// Fixed-point iteration of [`duhamel_map`] from the zero iterate. Stops when
/// successive iterates differ by at most `tol` in `sup_t L²`, at an exact
/// fixed point, when the distance stalls at rounding level, or after
/// [`MAX_PICARD`] iterations. Growth of the distance
/// counts toward divergence only above rounding level.
pub fn picard_iterate(
    nodes: &[f64],
    start: &DenseField,
    source: &Source,
    tol: f64,
) -> Result<(Vec<DenseField>, Vec<f64>)> {
    let mut current = vec![DenseField::zeros(&start.grid); nodes.len()];
    let mut history = Vec::new();
    let mut growth = 0;
    let first = source(0, start)?;
    for _ in 0..MAX_PICARD {
        let next = sweep(nodes, start, &first, source, &current)?;
        let dist = sup_distance(&next, &current);
        let size = next.iter().map(|f| f.l2_norm()).fold(0.0, f64::max);
        let last = history.last().copied().unwrap_or(f64::INFINITY);
        let grew = dist > last && dist > ROUNDING * size;
        let stalled = dist >= last && dist <= ROUNDING * size;
        growth = if grew { growth + 1 } else { 0 };
        history.push(dist);
        current = next;
        if growth >= 2 {
            return Err(Error::Divergence {
                message: format!("iterate distance grew twice in a row after {} iterations", history.len()),
                history,
            });
        }
        if dist <= tol || dist == 0.0 || stalled {
            break;
        }
    }
    Ok((current, history))
}

/// `Q(f, f) = Q⁺(f, f) - Q⁻(f, f)` slice by slice.
fn collision(ops: &VelocityOps, f: &DenseField) -> DenseField {
    let gain = map_slices(f, f, |a, b| ops.gain_slice(a, b));
    let loss = map_slices(f, f, |a, b| ops.loss_slice(a, b));
    gain.axpy(-1.0, &loss)
}

/// Sphere rule order of the collision terms inside the solves.
fn sphere_order(d: usize) -> usize {
    if d == 2 {
        16
    } else {
        6
    }
}

/// Solves `∂_t f + v·∇_x f = Q(f, f)` on `[0, T]` (or `[T, 0]` for `T < 0`)
/// with `n_steps` uniform steps by Picard iteration on the Duhamel form.
pub fn picard_local_solve(
    f0: &PhaseField,
    kernel: &CollisionKernel,
    t_end: f64,
    n_steps: usize,
    tol: f64,
) -> Result<(Trajectory, Vec<f64>)> {
    if n_steps == 0 || t_end == 0.0 || !t_end.is_finite() {
        return Err(Error::Parameter(format!("need n_steps >= 1 and T != 0, got {n_steps}, {t_end}")));
    }
    let start = f0.as_dense()?;
    let grid = &start.grid;
    kernel.validate(grid.d)?;
    let ops = VelocityOps::new(grid.velocity(), kernel, &sphere_quadrature(grid.d, sphere_order(grid.d))?)?;
    let nodes: Vec<f64> = (0..=n_steps).map(|k| t_end * k as f64 / n_steps as f64).collect();
    let source = |_: usize, f: &DenseField| Ok(collision(&ops, f));
    let (fields, history) = picard_iterate(&nodes, start, &source, tol)?;
    Ok((ascending(nodes, fields, grid)?, history))
}

fn ascending(mut nodes: Vec<f64>, mut fields: Vec<DenseField>, grid: &Grid) -> Result<Trajectory> {
    if nodes.len() > 1 && nodes[1] < nodes[0] {
        nodes.reverse();
        fields.reverse();
    }
    Trajectory::new(nodes, fields, grid.clone())
}

/// The correction `f_c` and its Z-norm bookkeeping.
#[derive(Clone, Debug)]
pub struct Correction {
    pub trajectory: Trajectory,
    /// `sup_t ‖f_c(t)‖_Z` over each subinterval, from `t = 0` toward `T*`.
    pub z_history: Vec<f64>,
    /// `‖f_a(t)‖_Z` on the mesh.
    pub z_fa: Vec<f64>,
    /// `‖f_c(t)‖_Z` on the mesh.
    pub z_fc: Vec<f64>,
    /// Picard distances per subinterval.
    pub histories: Vec<Vec<f64>>,
}

impl Correction {
    /// `z_history[j+1] / z_history[j]`.
    pub fn growth_factors(&self) -> Vec<f64> {
        self.z_history.windows(2).map(|w| w[1] / w[0]).collect()
    }

    /// `max_t ‖f_c‖_Z / min_t ‖f_a‖_Z`.
    pub fn subordination(&self) -> f64 {
        let top = self.z_fc.iter().fold(0.0f64, |m, x| m.max(*x));
        let bottom = self.z_fa.iter().fold(f64::INFINITY, |m, x| m.min(*x));
        top / bottom
    }
}

/// Solves `∂_t f_c + v·∇_x f_c = Q(f_a+f_c, f_a+f_c) - Q(f_a, f_a) - F_err`,
/// `f_c(0) = 0`, backward over `subintervals` equal pieces of `[T*, 0]` with
/// `steps` mesh steps each. `f_a` is frozen on the mesh. The Picard tolerance
/// is `tol` relative to `|T*| max_t ‖F_err(t)‖`, the size of the linear
/// response. With `forced_zero` the error term is replaced by zero.
pub fn solve_correction(
    p: &DeflationParams,
    engine: &Arc<BetaEngine>,
    grid: &Grid,
    subintervals: usize,
    steps: usize,
    tol: f64,
    forced_zero: bool,
) -> Result<Correction> {
    p.validate()?;
    if subintervals == 0 || steps == 0 {
        return Err(Error::Parameter("need at least one subinterval and one step".into()));
    }
    let n = subintervals * steps;
    let mesh: Vec<f64> = (0..=n).map(|k| p.t_star * k as f64 / n as f64).collect();
    check_cover(p, p.t_star, grid)?;
    let ops = velocity_ops(p, grid)?;
    let fa: Vec<DenseField> =
        mesh.iter().map(|&t| Ok(sample(&build_fa(p, engine, t)?, grid))).collect::<Result<_>>()?;
    let base: Vec<DenseField> = fa.iter().map(|f| collision(&ops, f)).collect();
    let err: Vec<DenseField> = if forced_zero {
        vec![DenseField::zeros(grid); n + 1]
    } else {
        mesh.iter()
            .map(|&t| {
                let fr = sample(&build_fr(p, engine, t)?, grid);
                let fb = sample(&build_fb(p, engine.family(), t)?, grid);
                Ok(error_terms_from_parts(&fr, &fb, &ops).total())
            })
            .collect::<Result<_>>()?
    };
    let scale = p.t_star.abs() * err.iter().map(|f| f.l2_norm()).fold(0.0, f64::max);
    let mut fc = vec![DenseField::zeros(grid); n + 1];
    let mut z_history = Vec::with_capacity(subintervals);
    let mut histories = Vec::with_capacity(subintervals);
    let z = |f: &DenseField| z_norm(&PhaseField::Dense(f.clone()), p.m, p.n2, p.gamma, p.r0);
    for j in 0..subintervals {
        let (a, b) = (j * steps, (j + 1) * steps);
        let source = |k: usize, f: &DenseField| {
            let i = a + k;
            let total = fa[i].axpy(1.0, f);
            Ok(collision(&ops, &total).axpy(-1.0, &base[i]).axpy(-1.0, &err[i]))
        };
        let (piece, history) = picard_iterate(&mesh[a..=b], &fc[a], &source, tol * scale).map_err(|e| match e {
            Error::Divergence { message, history } => {
                Error::Divergence { message: format!("subinterval {j}: {message}"), history }
            }
            other => other,
        })?;
        for (k, f) in piece.into_iter().enumerate() {
            fc[a + k] = f;
        }
        let sup = (a..=b).map(|i| z(&fc[i])).collect::<Result<Vec<_>>>()?.into_iter().fold(0.0, f64::max);
        z_history.push(sup);
        histories.push(history);
    }
    let z_fa = fa.iter().map(z).collect::<Result<Vec<_>>>()?;
    let z_fc = fc.iter().map(z).collect::<Result<Vec<_>>>()?;
    Ok(Correction { trajectory: ascending(mesh, fc, grid)?, z_history, z_fa, z_fc, histories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collision::Angular;
    use crate::deflation::{sphere_points, DeflationConfig};
    use crate::norms::sobolev_norm;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(grid: &Grid, seed: u64) -> DenseField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..grid.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        DenseField::new(grid.clone(), values).unwrap()
    }

    fn dense(f: DenseField) -> PhaseField {
        PhaseField::Dense(f)
    }

    fn moved(f: &DenseField, t: f64) -> DenseField {
        free_transport(&dense(f.clone()), t).unwrap().as_dense().unwrap().clone()
    }

    #[test]
    fn transport_at_zero_is_identity() {
        let g = Grid::new(2, 8, 2.0, 8, 1.0).unwrap();
        let f = random_field(&g, 1);
        assert_eq!(moved(&f, 0.0), f);
        let a = AnalyticField::new(crate::field::SupportBox::symmetric(2, 1.0, 1.0), |x, v| x[0] + v[1]);
        let b = free_transport(&PhaseField::Analytic(a.clone()), 0.0).unwrap();
        assert_eq!(b.value(&[0.3, 0.1], &[0.2, -0.4]), a.eval(&[0.3, 0.1], &[0.2, -0.4]));
    }

    #[test]
    fn x_constant_fields_do_not_move() {
        let g = Grid::new(2, 16, 3.0, 8, 2.0).unwrap();
        let f = DenseField::from_fn(&g, |_, v| (-(v[0] * v[0] + v[1] * v[1])).exp());
        for t in [-1.7, 0.4, 5.0] {
            let m = moved(&f, t);
            assert!(m.axpy(-1.0, &f).max_abs() < 1e-14, "{t}");
        }
    }

    #[test]
    fn gaussian_shift_matches_exact_translate() {
        let g = Grid::new(2, 64, 8.0, 8, 2.0).unwrap();
        let sigma = 0.6;
        let bump = |x: &[f64]| (-(x[0] * x[0] + x[1] * x[1]) / (2.0 * sigma * sigma)).exp();
        let f = DenseField::from_fn(&g, |x, v| bump(x) * (1.0 + 0.1 * v[0]));
        let t = 1.3;
        let m = moved(&f, t);
        let want = DenseField::from_fn(&g, |x, v| {
            let y = [x[0] - v[0] * t, x[1] - v[1] * t];
            bump(&y) * (1.0 + 0.1 * v[0])
        });
        assert!(m.axpy(-1.0, &want).max_abs() <= 1e-10, "{}", m.axpy(-1.0, &want).max_abs());
    }

    #[test]
    fn transport_is_unitary_group() {
        let g = Grid::new(2, 16, 2.0, 8, 1.5).unwrap();
        let f = random_field(&g, 2);
        let (s, t) = (0.37, -1.21);
        let twice = moved(&moved(&f, s), t);
        let once = moved(&f, s + t);
        assert!(twice.axpy(-1.0, &once).max_abs() <= 1e-12);
        assert!((moved(&f, t).l2_norm() - f.l2_norm()).abs() <= 1e-12 * f.l2_norm());
        assert!(moved(&moved(&f, t), -t).axpy(-1.0, &f).max_abs() <= 1e-12);
    }

    #[test]
    fn long_shift_of_localized_data_is_rejected() {
        let g = Grid::new(2, 32, 4.0, 8, 2.0).unwrap();
        let f = DenseField::from_fn(&g, |x, _| crate::field::smooth_cutoff(x));
        assert!(free_transport(&dense(f.clone()), 0.5).is_ok());
        assert!(matches!(free_transport(&dense(f), 3.0), Err(Error::Wraparound(_))));
    }

    #[test]
    fn analytic_transport_shifts_evaluator_and_plan() {
        let p = DeflationConfig { m: Some(2.0), n2: Some(4.0), n1: Some(16.0), ..Default::default() }.resolve();
        let fam = sphere_points(p.d, p.j).unwrap();
        let f0 = build_fb(&p, &fam, 0.0).unwrap();
        let t = p.t_star;
        let ft = free_transport(&f0, t).unwrap();
        let exact = build_fb(&p, &fam, t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let x = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            let r = rng.random_range(3.0..5.0);
            let th = rng.random_range(0.0..6.3f64);
            let v = [r * th.cos(), r * th.sin()];
            assert!((ft.value(&x, &v) - exact.value(&x, &v)).abs() <= 1e-12);
        }
        let (a, b) = (sobolev_norm(&ft, p.s0, p.r0).unwrap(), sobolev_norm(&f0, p.s0, p.r0).unwrap());
        assert!((a - b).abs() <= 1e-2 * b, "{a} {b}");
    }

    fn trajectory(g: &Grid, n: usize, t_hi: f64, f: impl Fn(f64, &[f64], &[f64]) -> f64) -> Trajectory {
        let times: Vec<f64> = (0..=n).map(|k| t_hi * k as f64 / n as f64).collect();
        let fields = times.iter().map(|&t| DenseField::from_fn(g, |x, v| f(t, x, v))).collect();
        Trajectory::new(times, fields, g.clone()).unwrap()
    }

    #[test]
    fn duhamel_of_simple_sources() {
        let g = Grid::new(2, 8, 2.0, 8, 1.0).unwrap();
        let zero = trajectory(&g, 4, 1.0, |_, _, _| 0.0);
        assert_eq!(duhamel(&zero, 0.0, 1.0).unwrap().as_dense().unwrap().max_abs(), 0.0);
        let flat = trajectory(&g, 4, 1.0, |t, _, v| (1.0 + t * t) * (1.0 + v[0] * v[0]));
        let got = duhamel(&flat, 0.25, 1.0).unwrap();
        let dt = 0.25;
        let trap = dt * (0.5 * (1.0 + 0.0625) + (1.0 + 0.25) + (1.0 + 0.5625) + 0.5 * 2.0);
        let want = DenseField::from_fn(&g, |_, v| trap * (1.0 + v[0] * v[0]));
        assert!(got.as_dense().unwrap().axpy(-1.0, &want).max_abs() < 1e-13);
        assert!(matches!(duhamel(&flat, 0.1, 1.0), Err(Error::Span(_))));
        assert!(matches!(duhamel(&flat, 0.0, 1.5), Err(Error::Span(_))));
        assert!(matches!(duhamel(&flat, 1.0, 0.5), Err(Error::Span(_))));
    }

    #[test]
    fn duhamel_is_linear_and_second_order() {
        let g = Grid::new(2, 16, 3.0, 8, 1.0).unwrap();
        let src = |t: f64, x: &[f64], v: &[f64]| (t * 2.0).sin() * (-(x[0] * x[0] + x[1] * x[1])).exp() * (1.0 + v[1]);
        let other = |t: f64, x: &[f64], _: &[f64]| t * (x[0] * 0.5).cos();
        let a = duhamel(&trajectory(&g, 8, 1.0, src), 0.0, 1.0).unwrap();
        let b = duhamel(&trajectory(&g, 8, 1.0, other), 0.0, 1.0).unwrap();
        let sum = duhamel(&trajectory(&g, 8, 1.0, |t, x, v| src(t, x, v) - 2.0 * other(t, x, v)), 0.0, 1.0).unwrap();
        let lin = a.as_dense().unwrap().axpy(-2.0, b.as_dense().unwrap());
        assert!(sum.as_dense().unwrap().axpy(-1.0, &lin).max_abs() < 1e-14);
        let runs: Vec<DenseField> = [4, 8, 16]
            .iter()
            .map(|&n| duhamel(&trajectory(&g, n, 1.0, src), 0.0, 1.0).unwrap().as_dense().unwrap().clone())
            .collect();
        let c1 = runs[1].axpy(-1.0, &runs[0]).l2_norm();
        let c2 = runs[2].axpy(-1.0, &runs[1]).l2_norm();
        assert!(c2 <= c1 / 3.0, "{c1} {c2}");
    }

    fn core_case() -> (DeflationParams, Arc<BetaEngine>, Grid) {
        let p = DeflationParams::default();
        let fam = sphere_points(p.d, p.j).unwrap();
        let e = Arc::new(BetaEngine::new(&p, &fam).unwrap());
        let grid = Grid::new(2, 16, 2.5 / p.m, 8, 2.5 / p.n1).unwrap();
        (p, e, grid)
    }

    #[test]
    fn core_ode_matches_closed_form() {
        let (p, e, grid) = core_case();
        let times: Vec<f64> = (0..=8).map(|k| p.t_star * (1.0 - k as f64 / 8.0)).collect();
        let run = fr_ode_evolve(&p, &e, &times, &grid).unwrap();
        let last = times.len() - 1;
        assert_eq!(run.ode.fields[last], run.closed.fields[last]);
        let initial = &run.ode.fields[last];
        for k in 0..last {
            let (a, b) = (&run.ode.fields[k], &run.closed.fields[k]);
            assert!(a.axpy(-1.0, b).l2_norm() <= 1e-3 * b.l2_norm(), "{k}");
            assert!(a.values.iter().zip(&initial.values).all(|(x, y)| x >= y));
        }
        assert!(matches!(fr_ode_evolve(&p, &e, &[p.t_star, 0.5 * p.t_star], &grid), Err(Error::Span(_))));
    }

    fn local_maxwellian(g: &Grid, eps: f64) -> DenseField {
        DenseField::from_fn(g, |x, v| {
            let rho = 1.0 + 0.5 * (PI * x[0] / g.l_x).cos();
            eps * rho * (-(v[0] * v[0] + v[1] * v[1]) / 2.0).exp() / (2.0 * PI)
        })
    }

    #[test]
    fn picard_of_zero_data() {
        let g = Grid::new(2, 8, 2.0, 16, 4.0).unwrap();
        let (traj, hist) =
            picard_local_solve(&dense(DenseField::zeros(&g)), &CollisionKernel::default(), 0.1, 2, 1e-12).unwrap();
        assert_eq!(hist, vec![0.0]);
        assert!(traj.fields.iter().all(|f| f.max_abs() == 0.0));
    }

    #[test]
    fn picard_contracts_on_small_maxwellian() {
        let g = Grid::new(2, 8, 2.0, 16, 5.0).unwrap();
        let f0 = local_maxwellian(&g, 1e-2);
        let kernel = CollisionKernel::default();
        let (traj, hist) = picard_local_solve(&dense(f0.clone()), &kernel, 0.1, 2, 0.0).unwrap();
        let ratios: Vec<f64> = hist.windows(2).map(|w| w[1] / w[0]).collect();
        assert!(ratios.len() >= 5 && ratios[..5].iter().all(|&r| r <= 0.5), "{hist:?}");
        assert!(traj.fields.iter().flat_map(|f| &f.values).all(|&x| x >= -1e-8));
        assert_eq!(traj.times, vec![0.0, 0.05, 0.1]);

        // A stopped iterate solves the discrete Duhamel equation to within 2·tol.
        let tol = 1e-9;
        let (traj, _) = picard_local_solve(&dense(f0.clone()), &kernel, 0.1, 2, tol).unwrap();
        let ops = VelocityOps::new(g.velocity(), &kernel, &sphere_quadrature(2, 16).unwrap()).unwrap();
        let source = |_: usize, f: &DenseField| Ok(collision(&ops, f));
        let again = duhamel_map(&traj.times, &f0, &source, &traj.fields).unwrap();
        assert!(sup_distance(&again, &traj.fields) <= 2.0 * tol);
    }

    #[test]
    fn picard_reports_divergence() {
        let g = Grid::new(2, 8, 2.0, 8, 1.0).unwrap();
        let f0 = local_maxwellian(&g, 1.0);
        let nodes: Vec<f64> = (0..=4).map(|k| k as f64).collect();
        let source = |_: usize, f: &DenseField| Ok(f.scaled(20.0));
        match picard_iterate(&nodes, &f0, &source, 1e-12) {
            Err(Error::Divergence { history, .. }) => {
                assert!(history.len() >= 3);
                let h = history.len();
                assert!(history[h - 1] > history[h - 2] && history[h - 2] > history[h - 3]);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn backward_solve_uses_ascending_times() {
        let g = Grid::new(2, 8, 2.0, 16, 5.0).unwrap();
        let f0 = local_maxwellian(&g, 1e-2);
        let kernel = CollisionKernel::power_law(-0.5, Angular::AbsCos);
        let (traj, _) = picard_local_solve(&dense(f0.clone()), &kernel, -0.1, 2, 1e-12).unwrap();
        assert_eq!(traj.times, vec![-0.1, -0.05, 0.0]);
        assert_eq!(traj.fields[2], f0);
    }

    #[test]
    fn correction_without_error_vanishes() {
        let p = DeflationConfig { m: Some(2.0), n2: Some(2.0), n1: Some(2.0), ..Default::default() }.resolve();
        let fam = sphere_points(p.d, p.j).unwrap();
        let e = Arc::new(BetaEngine::new(&p, &fam).unwrap());
        let grid = Grid::new(2, 16, 5.5, 16, 4.0).unwrap();
        let c = solve_correction(&p, &e, &grid, 2, 1, 1e-12, true).unwrap();
        assert!(c.trajectory.fields.iter().all(|f| f.max_abs() == 0.0));
        assert!(c.z_history.iter().all(|&z| z == 0.0));
        assert_eq!(c.trajectory.times.len(), 3);
        assert!(c.z_fa.iter().all(|&z| z > 0.0));
    }

    #[test]
    fn trajectory_validation() {
        let g = Grid::new(2, 8, 1.0, 8, 1.0).unwrap();
        let z = DenseField::zeros(&g);
        assert!(Trajectory::new(vec![0.0, 1.0], vec![z.clone()], g.clone()).is_err());
        assert!(Trajectory::new(vec![1.0, 0.0], vec![z.clone(), z.clone()], g.clone()).is_err());
        assert!(Trajectory::new(vec![0.0, 1.0, 3.0], vec![z.clone(), z.clone(), z.clone()], g.clone()).is_err());
        let t = Trajectory::new(vec![0.0, 0.5], vec![z.clone(), z], g).unwrap();
        assert_eq!(t.dt(), 0.5);
    }
}
