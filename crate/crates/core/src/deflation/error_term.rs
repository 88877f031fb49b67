//! The error term `F_err` of the approximate solution on a dense grid, in the
//! split form (transport of the core plus seven collision terms) and in the
//! defining form `∂_t f_a + v·∇_x f_a + Q⁻(f_a,f_a) − Q⁺(f_a,f_a)`.

use std::sync::Arc;

use rayon::prelude::*;

use super::{build_fa, build_fb, build_fr, BetaEngine, DeflationParams};
use crate::collision::{map_slices, sphere_quadrature, CollisionKernel, VelocityOps};
use crate::error::{Error, Result};
use crate::field::{transport_derivative, DenseField, Grid, PhaseField};

/// Sphere rule order used for the collision terms.
fn sphere_order(d: usize) -> usize {
    if d == 2 {
        16
    } else {
        6
    }
}

/// Collision operators on the velocity lattice of `grid`.
pub fn velocity_ops(p: &DeflationParams, grid: &Grid) -> Result<VelocityOps> {
    let kernel = CollisionKernel::power_law(p.gamma, p.angular);
    let sq = sphere_quadrature(p.d, sphere_order(p.d))?;
    VelocityOps::new(grid.velocity(), &kernel, &sq)
}

/// The eight summands of `F_err`.
#[derive(Clone, Debug)]
pub struct ErrorTerms {
    /// `v·∇_x f_r`
    pub transport: DenseField,
    /// `Q⁻(f_r,f_r)`, `Q⁻(f_b,f_r)`, `Q⁻(f_b,f_b)`
    pub loss: [DenseField; 3],
    /// `Q⁺(f_r,f_b)`, `Q⁺(f_b,f_r)`, `Q⁺(f_r,f_r)`, `Q⁺(f_b,f_b)`
    pub gain: [DenseField; 4],
}

impl ErrorTerms {
    pub fn total(&self) -> DenseField {
        let mut out = self.transport.clone();
        for l in &self.loss {
            out = out.axpy(1.0, l);
        }
        for g in &self.gain {
            out = out.axpy(-1.0, g);
        }
        out
    }
}

/// Samples a field on `grid`, in parallel over x-slices.
pub fn sample(f: &PhaseField, grid: &Grid) -> DenseField {
    if let PhaseField::Dense(df) = f {
        if &df.grid == grid {
            return df.clone();
        }
    }
    let nv = grid.v_len();
    let vs: Vec<Vec<f64>> = (0..nv).map(|i| grid.v_point(i)).collect();
    let values: Vec<f64> = (0..grid.x_len())
        .into_par_iter()
        .flat_map_iter(|ix| {
            let x = grid.x_point(ix);
            vs.iter().map(move |v| f.value(&x, v)).collect::<Vec<_>>()
        })
        .collect();
    DenseField { grid: grid.clone(), values }
}

/// Errors unless `grid` holds `f_a(t)` and the post-collision velocities of `Q⁺(f_a, f_a)`.
pub fn check_cover(p: &DeflationParams, t: f64, grid: &Grid) -> Result<()> {
    let x_need = 2.0 * p.n2 + 2.0 / p.m + 1.2 * p.n2 * t.abs();
    let v_max = ((1.2 * p.n2).powi(2) + (2.0 / p.m).powi(2)).sqrt();
    let v_need = 2f64.sqrt() * v_max;
    if grid.d != p.d || grid.l_x < x_need || grid.l_v < v_need {
        return Err(Error::Grid(format!(
            "grid (l_x = {}, l_v = {}) does not cover the supports: need l_x >= {x_need:.3}, l_v >= {v_need:.3}",
            grid.l_x, grid.l_v
        )));
    }
    Ok(())
}

/// The split form from dense samples of the core and the bumps.
pub fn error_terms_from_parts(fr: &DenseField, fb: &DenseField, ops: &VelocityOps) -> ErrorTerms {
    let loss = |f: &DenseField, g: &DenseField| map_slices(f, g, |a, b| ops.loss_slice(a, b));
    let gain = |f: &DenseField, g: &DenseField| map_slices(f, g, |a, b| ops.gain_slice(a, b));
    ErrorTerms {
        transport: transport_derivative(fr),
        loss: [loss(fr, fr), loss(fb, fr), loss(fb, fb)],
        gain: [gain(fr, fb), gain(fb, fr), gain(fr, fr), gain(fb, fb)],
    }
}

/// `F_err(t)` in split form on a grid covering both supports.
pub fn assemble_f_err(
    p: &DeflationParams,
    engine: &Arc<BetaEngine>,
    t: f64,
    grid: &Grid,
) -> Result<ErrorTerms> {
    check_cover(p, t, grid)?;
    let fr = sample(&build_fr(p, engine, t)?, grid);
    let fb = sample(&build_fb(p, engine.family(), t)?, grid);
    Ok(error_terms_from_parts(&fr, &fb, &velocity_ops(p, grid)?))
}

/// `F_err(t)` from its definition, with centered differences of step `step`
/// in `t` and along `v` in `x`.
pub fn f_err_time_derivative_form(
    p: &DeflationParams,
    engine: &Arc<BetaEngine>,
    t: f64,
    grid: &Grid,
    step: f64,
) -> Result<DenseField> {
    check_cover(p, t, grid)?;
    if !(step > 0.0 && t - step >= p.t_star && t + step <= 0.0) {
        return Err(Error::Span(format!(
            "difference stencil [{}, {}] leaves [T_star, 0]",
            t - step,
            t + step
        )));
    }
    let now = build_fa(p, engine, t)?;
    let before = build_fa(p, engine, t - step)?;
    let after = build_fa(p, engine, t + step)?;
    let nv = grid.v_len();
    let vs: Vec<Vec<f64>> = (0..nv).map(|i| grid.v_point(i)).collect();
    let d = p.d;
    let streaming: Vec<f64> = (0..grid.x_len())
        .into_par_iter()
        .flat_map_iter(|ix| {
            let x = grid.x_point(ix);
            let (now, before, after) = (&now, &before, &after);
            vs.iter()
                .map(move |v| {
                    let ahead: Vec<f64> = (0..d).map(|i| x[i] + step * v[i]).collect();
                    let behind: Vec<f64> = (0..d).map(|i| x[i] - step * v[i]).collect();
                    (after.value(&x, v) - before.value(&x, v) + now.value(&ahead, v) - now.value(&behind, v))
                        / (2.0 * step)
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let fa = sample(&now, grid);
    let ops = velocity_ops(p, grid)?;
    let loss = map_slices(&fa, &fa, |a, b| ops.loss_slice(a, b));
    let gain = map_slices(&fa, &fa, |a, b| ops.gain_slice(a, b));
    let values = streaming
        .iter()
        .zip(&loss.values)
        .zip(&gain.values)
        .map(|((s, l), g)| s + l - g)
        .collect();
    Ok(DenseField { grid: grid.clone(), values })
}
