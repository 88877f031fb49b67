//! Phase-space grids, field representations, discrete Fourier transforms,
//! multilinear interpolation and the smooth cutoff.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Uniform periodic grid on `[-l_x, l_x)^d × [-l_v, l_v)^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub d: usize,
    pub n_x: usize,
    pub l_x: f64,
    pub n_v: usize,
    pub l_v: f64,
}

impl Grid {
    pub fn new(d: usize, n_x: usize, l_x: f64, n_v: usize, l_v: f64) -> Result<Grid> {
        if d != 2 && d != 3 {
            return Err(Error::Grid(format!("dimension must be 2 or 3, got {d}")));
        }
        for (name, n) in [("n_x", n_x), ("n_v", n_v)] {
            if n < 8 || !n.is_power_of_two() {
                return Err(Error::Grid(format!("{name} must be a power of two >= 8, got {n}")));
            }
        }
        if !(l_x > 0.0 && l_x.is_finite() && l_v > 0.0 && l_v.is_finite()) {
            return Err(Error::Grid(format!("box half-widths must be positive, got {l_x}, {l_v}")));
        }
        Ok(Grid { d, n_x, l_x, n_v, l_v })
    }

    pub fn h_x(&self) -> f64 {
        2.0 * self.l_x / self.n_x as f64
    }

    pub fn h_v(&self) -> f64 {
        2.0 * self.l_v / self.n_v as f64
    }

    /// Number of x-nodes, `n_x^d`.
    pub fn x_len(&self) -> usize {
        self.n_x.pow(self.d as u32)
    }

    /// Number of v-nodes, `n_v^d`.
    pub fn v_len(&self) -> usize {
        self.n_v.pow(self.d as u32)
    }

    pub fn len(&self) -> usize {
        self.x_len() * self.v_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_coord(&self, i: usize) -> f64 {
        -self.l_x + i as f64 * self.h_x()
    }

    pub fn v_coord(&self, i: usize) -> f64 {
        -self.l_v + i as f64 * self.h_v()
    }

    /// Coordinates of the flat x-index `ix` (axis 0 slowest).
    pub fn x_point(&self, ix: usize) -> Vec<f64> {
        unflatten(ix, self.n_x, self.d).into_iter().map(|i| self.x_coord(i)).collect()
    }

    pub fn v_point(&self, iv: usize) -> Vec<f64> {
        unflatten(iv, self.n_v, self.d).into_iter().map(|i| self.v_coord(i)).collect()
    }

    /// The same grid seen as a velocity lattice only.
    pub fn velocity(&self) -> VelocityGrid {
        VelocityGrid { d: self.d, n: self.n_v, l: self.l_v }
    }

    /// Array shape with x axes first, then v axes.
    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.n_x; self.d];
        s.extend(std::iter::repeat_n(self.n_v, self.d));
        s
    }

    /// Period `2L` of each array axis.
    pub fn periods(&self) -> Vec<f64> {
        let mut p = vec![2.0 * self.l_x; self.d];
        p.extend(std::iter::repeat_n(2.0 * self.l_v, self.d));
        p
    }
}

/// Velocity lattice `[-l, l)^d` with `n` nodes per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityGrid {
    pub d: usize,
    pub n: usize,
    pub l: f64,
}

impl VelocityGrid {
    pub fn h(&self) -> f64 {
        2.0 * self.l / self.n as f64
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn coord(&self, i: usize) -> f64 {
        -self.l + i as f64 * self.h()
    }

    pub fn point(&self, iv: usize) -> Vec<f64> {
        unflatten(iv, self.n, self.d).into_iter().map(|i| self.coord(i)).collect()
    }

    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.d as i32)
    }
}

pub fn unflatten(mut flat: usize, n: usize, d: usize) -> Vec<usize> {
    let mut idx = vec![0; d];
    for k in (0..d).rev() {
        idx[k] = flat % n;
        flat /= n;
    }
    idx
}

pub fn flatten(idx: &[usize], n: usize) -> usize {
    idx.iter().fold(0, |acc, &i| acc * n + i)
}

/// Signed DFT frequency `2πm/period` of index `i` on an axis of `n` points.
pub fn frequency(i: usize, n: usize, period: f64) -> f64 {
    let m = if i < n / 2 { i as f64 } else { i as f64 - n as f64 };
    2.0 * PI * m / period
}

/// Axis-aligned box in phase space.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportBox {
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub v_lo: Vec<f64>,
    pub v_hi: Vec<f64>,
}

impl SupportBox {
    pub fn symmetric(d: usize, x_half: f64, v_half: f64) -> SupportBox {
        SupportBox {
            x_lo: vec![-x_half; d],
            x_hi: vec![x_half; d],
            v_lo: vec![-v_half; d],
            v_hi: vec![v_half; d],
        }
    }

    pub fn contains(&self, x: &[f64], v: &[f64]) -> bool {
        let inside = |p: &[f64], lo: &[f64], hi: &[f64]| {
            p.iter().zip(lo).zip(hi).all(|((&c, &a), &b)| c >= a && c <= b)
        };
        inside(x, &self.x_lo, &self.x_hi) && inside(v, &self.v_lo, &self.v_hi)
    }

    pub fn union(&self, other: &SupportBox) -> SupportBox {
        let lo = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p.min(*q)).collect();
        let hi = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p.max(*q)).collect();
        SupportBox {
            x_lo: lo(&self.x_lo, &other.x_lo),
            x_hi: hi(&self.x_hi, &other.x_hi),
            v_lo: lo(&self.v_lo, &other.v_lo),
            v_hi: hi(&self.v_hi, &other.v_hi),
        }
    }
}

/// One velocity-partitioned block of a sampling plan: velocity nodes with
/// quadrature weights, and a periodic x-lattice (optionally in a rotated frame)
/// covering the x-support of the field at those velocities.
#[derive(Clone, Debug)]
pub struct SamplePatch {
    /// Row-major orthogonal `d×d` matrix; global `x = frameᵀ · local`.
    pub frame: Option<Vec<f64>>,
    pub x_lo: Vec<f64>,
    pub x_hi: Vec<f64>,
    pub n_x: Vec<usize>,
    pub v_nodes: Vec<Vec<f64>>,
    pub v_weights: Vec<f64>,
    /// Number of congruent copies this patch stands for.
    pub multiplicity: f64,
}

impl SamplePatch {
    pub fn x_len(&self) -> usize {
        self.n_x.iter().product()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.x_hi[axis] - self.x_lo[axis]) / self.n_x[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..self.n_x.len()).map(|a| self.spacing(a)).product()
    }

    /// Global coordinates of lattice node `flat`.
    pub fn x_point(&self, flat: usize) -> Vec<f64> {
        let d = self.n_x.len();
        let mut rem = flat;
        let mut local = vec![0.0; d];
        for a in (0..d).rev() {
            let i = rem % self.n_x[a];
            rem /= self.n_x[a];
            local[a] = self.x_lo[a] + i as f64 * self.spacing(a);
        }
        match &self.frame {
            None => local,
            Some(r) => (0..d).map(|i| (0..d).map(|k| r[k * d + i] * local[k]).sum()).collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct SamplePlan {
    pub patches: Vec<SamplePatch>,
}

type Evaluator = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;

/// Lazily evaluated field with a declared support box.
#[derive(Clone)]
pub struct AnalyticField {
    eval: Arc<Evaluator>,
    pub support: SupportBox,
    pub plan: Option<Arc<SamplePlan>>,
}

impl std::fmt::Debug for AnalyticField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnalyticField").field("support", &self.support).finish_non_exhaustive()
    }
}

impl AnalyticField {
    pub fn new<F>(support: SupportBox, eval: F) -> AnalyticField
    where
        F: Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    {
        AnalyticField { eval: Arc::new(eval), support, plan: None }
    }

    pub fn with_plan(mut self, plan: SamplePlan) -> AnalyticField {
        self.plan = Some(Arc::new(plan));
        self
    }

    pub fn eval(&self, x: &[f64], v: &[f64]) -> f64 {
        if self.support.contains(x, v) {
            (self.eval)(x, v)
        } else {
            0.0
        }
    }

    /// Values on the x-lattice of `patch` at velocity `v`.
    pub fn sample_patch(&self, patch: &SamplePatch, v: &[f64]) -> Vec<f64> {
        (0..patch.x_len()).map(|i| self.eval(&patch.x_point(i), v)).collect()
    }
}

/// Dense samples on a grid, x-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl DenseField {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<DenseField> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "expected {} values, got {}",
                grid.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::Representation(format!("non-finite value at index {i}")));
        }
        Ok(DenseField { grid, values })
    }

    pub fn zeros(grid: &Grid) -> DenseField {
        DenseField { grid: grid.clone(), values: vec![0.0; grid.len()] }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64], &[f64]) -> f64) -> DenseField {
        let xs: Vec<Vec<f64>> = (0..grid.x_len()).map(|i| grid.x_point(i)).collect();
        let vs: Vec<Vec<f64>> = (0..grid.v_len()).map(|i| grid.v_point(i)).collect();
        let mut values = Vec::with_capacity(grid.len());
        for x in &xs {
            for v in &vs {
                values.push(f(x, v));
            }
        }
        DenseField { grid: grid.clone(), values }
    }

    pub fn slice(&self, ix: usize) -> &[f64] {
        let nv = self.grid.v_len();
        &self.values[ix * nv..(ix + 1) * nv]
    }

    pub fn slice_mut(&mut self, ix: usize) -> &mut [f64] {
        let nv = self.grid.v_len();
        &mut self.values[ix * nv..(ix + 1) * nv]
    }

    pub fn at(&self, ix: usize, iv: usize) -> f64 {
        self.values[ix * self.grid.v_len() + iv]
    }

    /// Discrete `L²_{x,v}` norm with cell volume `h_x^d h_v^d`.
    pub fn l2_norm(&self) -> f64 {
        let vol = (self.grid.h_x() * self.grid.h_v()).powi(self.grid.d as i32);
        (self.values.iter().map(|x| x * x).sum::<f64>() * vol).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, a: f64) -> DenseField {
        DenseField { grid: self.grid.clone(), values: self.values.iter().map(|x| a * x).collect() }
    }

    /// `self + a·other`.
    pub fn axpy(&self, a: f64, other: &DenseField) -> DenseField {
        let values = self.values.iter().zip(&other.values).map(|(x, y)| x + a * y).collect();
        DenseField { grid: self.grid.clone(), values }
    }
}

#[derive(Clone, Debug)]
pub enum PhaseField {
    Dense(DenseField),
    Analytic(AnalyticField),
}

impl PhaseField {
    pub fn dense(grid: Grid, values: Vec<f64>) -> Result<PhaseField> {
        Ok(PhaseField::Dense(DenseField::new(grid, values)?))
    }

    pub fn as_dense(&self) -> Result<&DenseField> {
        match self {
            PhaseField::Dense(f) => Ok(f),
            PhaseField::Analytic(_) => {
                Err(Error::Representation("operation requires a dense field".into()))
            }
        }
    }

    /// Point value: evaluator call or multilinear interpolation.
    pub fn value(&self, x: &[f64], v: &[f64]) -> f64 {
        interpolate(self, x, v)
    }

    /// Samples the field on `grid`.
    pub fn to_dense(&self, grid: &Grid) -> DenseField {
        match self {
            PhaseField::Dense(f) if &f.grid == grid => f.clone(),
            _ => DenseField::from_fn(grid, |x, v| self.value(x, v)),
        }
    }
}

/// Transition profile: 1 on `t ≤ 1`, 0 on `t ≥ 2`, smooth quotient of `exp(-1/s)` bumps between.
pub fn cutoff_profile(t: f64) -> f64 {
    if t <= 1.0 {
        1.0
    } else if t >= 2.0 {
        0.0
    } else {
        let a = (-1.0 / (2.0 - t)).exp();
        let b = (-1.0 / (t - 1.0)).exp();
        a / (a + b)
    }
}

/// Derivative of [`cutoff_profile`].
pub fn cutoff_profile_derivative(t: f64) -> f64 {
    if t <= 1.0 || t >= 2.0 {
        return 0.0;
    }
    let (p, q) = (2.0 - t, t - 1.0);
    let a = (-1.0 / p).exp();
    let b = (-1.0 / q).exp();
    // a' = -a/p², b' = b/q²
    let num = -a / (p * p) * b - a * b / (q * q);
    num / ((a + b) * (a + b))
}

/// `χ(x) = ψ(|x|)`.
pub fn smooth_cutoff(x: &[f64]) -> f64 {
    cutoff_profile(x.iter().map(|c| c * c).sum::<f64>().sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    V,
    T,
}

/// Complex table over modes of the transformed axes (other axes stay in physical space).
#[derive(Clone, Debug)]
pub struct SpectralField {
    pub values: Vec<Complex64>,
    pub shape: Vec<usize>,
    pub periods: Vec<f64>,
    pub transformed: Vec<bool>,
    pub grid: Grid,
}

impl SpectralField {
    /// Signed frequency `2πm/(2L)` of index `i` along array axis `axis`.
    pub fn frequency(&self, axis: usize, i: usize) -> f64 {
        frequency(i, self.shape[axis], self.periods[axis])
    }
}

fn array_axes(grid: &Grid, axes: &[Axis]) -> Result<Vec<usize>> {
    let d = grid.d;
    let mut out = Vec::new();
    for a in axes {
        match a {
            Axis::X => out.extend(0..d),
            Axis::V => out.extend(d..2 * d),
            Axis::T => {
                return Err(Error::Shape("axis t requested on a single phase field".into()))
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// In-place FFT of a row-major array along `axis`. The inverse is normalized.
pub fn fft_axis(
    data: &mut [Complex64],
    shape: &[usize],
    axis: usize,
    inverse: bool,
    planner: &mut FftPlanner<f64>,
) {
    let n = shape[axis];
    let stride: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let scale = if inverse { 1.0 / n as f64 } else { 1.0 };
    for o in 0..outer {
        let base = o * n * stride;
        for s in 0..stride {
            for (k, c) in line.iter_mut().enumerate() {
                *c = data[base + k * stride + s];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (k, c) in line.iter().enumerate() {
                data[base + k * stride + s] = *c * scale;
            }
        }
    }
}

pub fn fft_axes(data: &mut [Complex64], shape: &[usize], axes: &[usize], inverse: bool) {
    let mut planner = FftPlanner::new();
    for &a in axes {
        fft_axis(data, shape, a, inverse, &mut planner);
    }
}

/// Unnormalized forward DFT of a dense field along the named axes.
pub fn transform(f: &PhaseField, axes: &[Axis]) -> Result<SpectralField> {
    let f = f.as_dense()?;
    let grid = &f.grid;
    let idx = array_axes(grid, axes)?;
    let shape = grid.shape();
    let mut values: Vec<Complex64> = f.values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_axes(&mut values, &shape, &idx, false);
    let mut transformed = vec![false; shape.len()];
    for a in idx {
        transformed[a] = true;
    }
    Ok(SpectralField { values, shape, periods: grid.periods(), transformed, grid: grid.clone() })
}

/// Normalized inverse DFT of every transformed axis; the real part is returned.
pub fn inverse_transform(s: &SpectralField) -> Result<PhaseField> {
    let axes: Vec<usize> = (0..s.shape.len()).filter(|&a| s.transformed[a]).collect();
    let mut values = s.values.clone();
    fft_axes(&mut values, &s.shape, &axes, true);
    PhaseField::dense(s.grid.clone(), values.into_iter().map(|c| c.re).collect())
}

/// `F⁻¹[symbol(k) · F f]` along the named axes. The symbol receives the
/// frequency vector of the transformed axes in array order (x before v).
pub fn fourier_multiplier(
    f: &PhaseField,
    axes: &[Axis],
    symbol: impl Fn(&[f64]) -> f64,
) -> Result<PhaseField> {
    let mut s = transform(f, axes)?;
    let tr: Vec<usize> = (0..s.shape.len()).filter(|&a| s.transformed[a]).collect();
    let sub_shape: Vec<usize> = tr.iter().map(|&a| s.shape[a]).collect();
    let count: usize = sub_shape.iter().product();
    let mut table = Vec::with_capacity(count);
    let mut k = vec![0.0; tr.len()];
    for flat in 0..count {
        let mut rem = flat;
        for j in (0..tr.len()).rev() {
            let i = rem % sub_shape[j];
            rem /= sub_shape[j];
            k[j] = s.frequency(tr[j], i);
        }
        let m = symbol(&k);
        if !m.is_finite() {
            return Err(Error::Symbol(format!("symbol is {m} at frequency {k:?}")));
        }
        table.push(m);
    }
    let strides = row_major_strides(&s.shape);
    for (pos, c) in s.values.iter_mut().enumerate() {
        let mut t = 0;
        for (j, &a) in tr.iter().enumerate() {
            t = t * sub_shape[j] + (pos / strides[a]) % s.shape[a];
        }
        *c *= table[t];
    }
    inverse_transform(&s)
}

/// Applies `symbol(k, v)` to the x-spectrum of every velocity column; the real
/// part of the result is kept. Columns that vanish are skipped.
pub fn x_multiplier(
    f: &DenseField,
    symbol: impl Fn(&[f64], &[f64]) -> Complex64 + Sync,
) -> DenseField {
    use rayon::prelude::*;
    let g = &f.grid;
    let d = g.d;
    let nv = g.v_len();
    let nx = g.x_len();
    let shape = vec![g.n_x; d];
    let axes: Vec<usize> = (0..d).collect();
    let period = 2.0 * g.l_x;
    let freqs: Vec<Vec<f64>> = (0..nx)
        .map(|flat| unflatten(flat, g.n_x, d).iter().map(|&i| frequency(i, g.n_x, period)).collect())
        .collect();
    let columns: Vec<Option<Vec<f64>>> = (0..nv)
        .into_par_iter()
        .map(|iv| {
            let mut col: Vec<Complex64> =
                (0..nx).map(|ix| Complex64::new(f.values[ix * nv + iv], 0.0)).collect();
            if col.iter().all(|c| c.re == 0.0) {
                return None;
            }
            let v = g.v_point(iv);
            fft_axes(&mut col, &shape, &axes, false);
            for (c, k) in col.iter_mut().zip(&freqs) {
                *c *= symbol(k, &v);
            }
            fft_axes(&mut col, &shape, &axes, true);
            Some(col.into_iter().map(|c| c.re).collect())
        })
        .collect();
    let mut out = DenseField::zeros(g);
    for (iv, col) in columns.into_iter().enumerate() {
        if let Some(col) = col {
            for (ix, x) in col.into_iter().enumerate() {
                out.values[ix * nv + iv] = x;
            }
        }
    }
    out
}

/// Spectral `v·∇_x f`; the Nyquist mode of each axis is dropped.
pub fn transport_derivative(f: &DenseField) -> DenseField {
    let n = f.grid.n_x;
    let nyquist = PI * n as f64 / (2.0 * f.grid.l_x);
    x_multiplier(f, |k, v| {
        let kv: f64 = k.iter().zip(v).map(|(a, b)| if (a.abs() - nyquist).abs() < 1e-9 * nyquist { 0.0 } else { a * b }).sum();
        Complex64::new(0.0, kv)
    })
}

pub fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}

/// Multilinear interpolation on a dense field; zero outside `[-L, L)`.
pub fn interpolate(f: &PhaseField, x: &[f64], v: &[f64]) -> f64 {
    match f {
        PhaseField::Analytic(a) => a.eval(x, v),
        PhaseField::Dense(df) => {
            let g = &df.grid;
            let d = g.d;
            let mut base = Vec::with_capacity(2 * d);
            let mut frac = Vec::with_capacity(2 * d);
            let mut dims = Vec::with_capacity(2 * d);
            for (p, n, l, h) in x
                .iter()
                .map(|&c| (c, g.n_x, g.l_x, g.h_x()))
                .chain(v.iter().map(|&c| (c, g.n_v, g.l_v, g.h_v())))
            {
                if p < -l || p >= l {
                    return 0.0;
                }
                let s = (p + l) / h;
                let i = (s.floor() as usize).min(n - 1);
                base.push(i);
                frac.push(s - i as f64);
                dims.push(n);
            }
            let strides = row_major_strides(&dims);
            let mut acc = 0.0;
            for corner in 0..(1usize << (2 * d)) {
                let mut w = 1.0;
                let mut off = 0;
                let mut inside = true;
                for a in 0..2 * d {
                    let bit = (corner >> a) & 1;
                    let i = base[a] + bit;
                    w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                    if i >= dims[a] {
                        inside = false;
                        break;
                    }
                    off += i * strides[a];
                }
                if inside && w != 0.0 {
                    acc += w * df.values[off];
                }
            }
            acc
        }
    }
}

/// Multilinear interpolation of one velocity slice; zero outside the box.
#[inline]
pub fn interpolate_slice(slice: &[f64], vg: &VelocityGrid, v: &[f64]) -> f64 {
    let h = vg.h();
    let n = vg.n;
    match vg.d {
        2 => {
            let s0 = (v[0] + vg.l) / h;
            let s1 = (v[1] + vg.l) / h;
            if !(s0 >= 0.0 && s1 >= 0.0) {
                return 0.0;
            }
            let (i0, i1) = (s0 as usize, s1 as usize);
            if i0 >= n || i1 >= n {
                return 0.0;
            }
            let (f0, f1) = (s0 - i0 as f64, s1 - i1 as f64);
            let at = |a: usize, b: usize| if a < n && b < n { slice[a * n + b] } else { 0.0 };
            (1.0 - f0) * ((1.0 - f1) * at(i0, i1) + f1 * at(i0, i1 + 1))
                + f0 * ((1.0 - f1) * at(i0 + 1, i1) + f1 * at(i0 + 1, i1 + 1))
        }
        _ => {
            let mut base = [0usize; 3];
            let mut frac = [0.0; 3];
            for a in 0..3 {
                let s = (v[a] + vg.l) / h;
                if !(s >= 0.0) {
                    return 0.0;
                }
                let i = s as usize;
                if i >= n {
                    return 0.0;
                }
                base[a] = i;
                frac[a] = s - i as f64;
            }
            let mut acc = 0.0;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut off = 0;
                let mut inside = true;
                for a in 0..3 {
                    let bit = (corner >> a) & 1;
                    let i = base[a] + bit;
                    if i >= n {
                        inside = false;
                        break;
                    }
                    w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                    off = off * n + i;
                }
                if inside {
                    acc += w * slice[off];
                }
            }
            acc
        }
    }
}

const MAGIC: &[u8; 4] = b"KDF1";

/// Writes the flat binary container: magic, `d, n_x, n_v` as u64, `L_x, L_v` as f64, values.
pub fn write_kdf1<W: Write>(mut w: W, f: &DenseField) -> Result<()> {
    let g = &f.grid;
    w.write_all(MAGIC)?;
    for n in [g.d, g.n_x, g.n_v] {
        w.write_all(&(n as u64).to_le_bytes())?;
    }
    for l in [g.l_x, g.l_v] {
        w.write_all(&l.to_le_bytes())?;
    }
    for x in &f.values {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_kdf1<R: Read>(mut r: R) -> Result<DenseField> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("missing KDF1 magic".into()));
    }
    let mut word = [0u8; 8];
    let mut ints = [0usize; 3];
    for n in ints.iter_mut() {
        r.read_exact(&mut word)?;
        *n = u64::from_le_bytes(word) as usize;
    }
    let mut reals = [0.0; 2];
    for l in reals.iter_mut() {
        r.read_exact(&mut word)?;
        *l = f64::from_le_bytes(word);
    }
    let grid = Grid::new(ints[0], ints[1], reals[0], ints[2], reals[1])?;
    let mut values = Vec::with_capacity(grid.len());
    for _ in 0..grid.len() {
        r.read_exact(&mut word)?;
        values.push(f64::from_le_bytes(word));
    }
    DenseField::new(grid, values)
}
