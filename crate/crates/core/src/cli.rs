//! Experiment runner: one JSON configuration, dotted overrides, CSV/JSON
//! artifacts and a manifest per run.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Number, Value};

use crate::collision::{
    collision_invariants, gain_slice_spectral, sphere_quadrature, CollisionKernel, EtaRule, Invariants,
    VelocityOps,
};
use crate::deflation::{
    check_cover, deflation_experiment, sphere_points, BetaEngine, DeflationConfig, DeflationParams,
    DeflationReport,
};
use crate::error::{Error, Result};
use crate::field::{DenseField, Grid, PhaseField, VelocityGrid};
use crate::norms::{check_inequality, default_setup, InequalityKind, InequalityReport, NormSpec};
use crate::solver::{picard_local_solve, solve_correction, Correction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Deflation,
    CollisionCheck,
    InequalitySuite,
    Wellposed,
    Correction,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Deflation => "deflation",
            Command::CollisionCheck => "collision-check",
            Command::InequalitySuite => "inequality-suite",
            Command::Wellposed => "wellposed",
            Command::Correction => "correction",
        }
    }

    fn stem(self) -> &'static str {
        match self {
            Command::Deflation => "deflation",
            Command::CollisionCheck => "collision_check",
            Command::InequalitySuite => "inequality_suite",
            Command::Wellposed => "wellposed",
            Command::Correction => "correction",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "kdl", version, about = "Soft-potential Boltzmann and norm-deflation experiments")]
pub struct Cli {
    pub command: Command,
    /// JSON configuration document.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config entry, e.g. `deflation.params.M=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Worker thread cap.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Uniform phase-space grid as configured.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n_x: usize,
    pub l_x: f64,
    pub n_v: usize,
    pub l_v: f64,
}

impl GridSpec {
    pub fn build(&self, d: usize) -> Result<Grid> {
        Grid::new(d, self.n_x, self.l_x, self.n_v, self.l_v)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeflationRun {
    pub params: DeflationConfig,
    /// Defaults to the Sobolev norm with `s = s0`, `r = r0`.
    pub norm: Option<NormSpec>,
    pub n_times: usize,
}

impl Default for DeflationRun {
    fn default() -> Self {
        DeflationRun { params: DeflationConfig::default(), norm: None, n_times: 2 }
    }
}

impl DeflationRun {
    pub fn norm_spec(&self, p: &DeflationParams) -> NormSpec {
        self.norm.clone().unwrap_or(NormSpec::Sobolev { s: p.s0, r: p.r0 })
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.params.resolve();
        p.validate()?;
        self.norm_spec(&p).validate()?;
        if self.n_times < 2 {
            return Err(Error::Parameter(format!("n_times must be >= 2, got {}", self.n_times)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollisionCheckRun {
    pub kernel: CollisionKernel,
    pub d: usize,
    pub n_v: usize,
    pub l_v: f64,
    pub sphere_order: usize,
    /// Random smooth pairs for the direct-vs-spectral gain comparison.
    pub pairs: usize,
    /// Lattice sizes of the conservation sweep.
    pub sweep: Vec<usize>,
}

impl Default for CollisionCheckRun {
    fn default() -> Self {
        CollisionCheckRun {
            kernel: CollisionKernel::default(),
            d: 2,
            n_v: 32,
            l_v: 3.0,
            sphere_order: 32,
            pairs: 10,
            sweep: vec![16, 32, 64],
        }
    }
}

impl CollisionCheckRun {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate(self.d)?;
        sphere_quadrature(self.d, self.sphere_order)?;
        for &n in self.sweep.iter().chain([&self.n_v]) {
            Grid::new(self.d, 8, 1.0, n, self.l_v)?;
        }
        if self.pairs > 0 && self.kernel.gamma >= 0.0 {
            return Err(Error::Unsupported("spectral gain needs gamma < 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InequalityRun {
    pub kinds: Vec<String>,
    pub trials: usize,
}

impl Default for InequalityRun {
    fn default() -> Self {
        InequalityRun { kinds: InequalityKind::ALL.iter().map(|k| k.name().to_string()).collect(), trials: 100 }
    }
}

impl InequalityRun {
    pub fn kinds(&self) -> Result<Vec<InequalityKind>> {
        self.kinds.iter().map(|k| InequalityKind::from_str(k)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Parameter("trials must be >= 1".into()));
        }
        for k in self.kinds()? {
            default_setup(k).validate()?;
        }
        Ok(())
    }
}

/// Picard solve from `ε·(1 + ½cos(πx₁/l_x))·M(v)`, `M` the standard Maxwellian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WellposedRun {
    pub kernel: CollisionKernel,
    pub grid: GridSpec,
    pub epsilon: f64,
    pub t_end: f64,
    pub n_steps: usize,
    pub tol: f64,
}

impl Default for WellposedRun {
    fn default() -> Self {
        WellposedRun {
            kernel: CollisionKernel::default(),
            grid: GridSpec { n_x: 8, l_x: 2.0, n_v: 32, l_v: 5.0 },
            epsilon: 1e-2,
            t_end: 0.1,
            n_steps: 2,
            tol: 0.0,
        }
    }
}

impl WellposedRun {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate(2)?;
        self.grid.build(2)?;
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) || !(self.tol >= 0.0) {
            return Err(Error::Parameter("epsilon and tol must be nonnegative".into()));
        }
        if self.n_steps == 0 || self.t_end == 0.0 || !self.t_end.is_finite() {
            return Err(Error::Parameter("need n_steps >= 1 and a finite t_end != 0".into()));
        }
        Ok(())
    }

    pub fn initial(&self, grid: &Grid) -> DenseField {
        let eps = self.epsilon;
        DenseField::from_fn(grid, |x, v| {
            let rho = 1.0 + 0.5 * (PI * x[0] / grid.l_x).cos();
            eps * rho * (-(v[0] * v[0] + v[1] * v[1]) / 2.0).exp() / (2.0 * PI)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionRun {
    pub params: DeflationConfig,
    pub grid: GridSpec,
    pub subintervals: usize,
    pub steps: usize,
    /// Picard tolerance relative to `|T*|·max‖F_err‖`.
    pub tol: f64,
    pub forced_zero: bool,
}

impl Default for CorrectionRun {
    fn default() -> Self {
        CorrectionRun {
            params: DeflationConfig { m: Some(2.0), n2: Some(2.0), n1: Some(2.0), ..Default::default() },
            grid: GridSpec { n_x: 32, l_x: 5.5, n_v: 16, l_v: 4.0 },
            subintervals: 8,
            steps: 1,
            tol: 1e-4,
            forced_zero: false,
        }
    }
}

impl CorrectionRun {
    pub fn validate(&self) -> Result<()> {
        let p = self.params.resolve();
        p.validate()?;
        let grid = self.grid.build(p.d)?;
        check_cover(&p, p.t_star, &grid)?;
        if self.subintervals == 0 || self.steps == 0 || !(self.tol >= 0.0) {
            return Err(Error::Parameter("need subintervals, steps >= 1 and tol >= 0".into()));
        }
        Ok(())
    }
}

/// The whole configuration document; each command reads its own section.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub command: Option<String>,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub deflation: DeflationRun,
    pub collision_check: CollisionCheckRun,
    pub inequality_suite: InequalityRun,
    pub wellposed: WellposedRun,
    pub correction: CorrectionRun,
}

impl ExperimentConfig {
    pub fn validate(&self, command: Command) -> Result<()> {
        if let Some(c) = &self.command {
            if c != command.name() {
                return Err(Error::Config(format!("config is for command {c}, not {}", command.name())));
            }
        }
        match command {
            Command::Deflation => self.deflation.validate(),
            Command::CollisionCheck => self.collision_check.validate(),
            Command::InequalitySuite => self.inequality_suite.validate(),
            Command::Wellposed => self.wellposed.validate(),
            Command::Correction => self.correction.validate(),
        }
    }
}

/// Sets `path` (dot-separated) in a JSON document; the value is parsed as
/// JSON when possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    for part in &parts[..parts.len() - 1] {
        if node.is_null() {
            *node = json!({});
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-object")))?;
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    if node.is_null() {
        *node = json!({});
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {key:?} descends into a non-object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Recursively overlays `top` on `base`; objects merge, anything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Layers the config file (if any) and the overrides over the defaults.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc = serde_json::to_value(ExperimentConfig::default()).expect("serializable defaults");
    if let Some(p) = path {
        let text =
            fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        if !file.is_object() {
            return Err(Error::Config(format!("{}: top level must be an object", p.display())));
        }
        merge(&mut doc, file);
    }
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
}

/// Rewrites every non-integer number with 17 significant digits.
pub fn fixed_precision(v: Value) -> Value {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => match n.as_f64() {
            Some(x) => Value::Number(Number::from_str(&format!("{x:.16e}")).expect("formatted float")),
            None => Value::Number(n),
        },
        Value::Array(a) => Value::Array(a.into_iter().map(fixed_precision).collect()),
        Value::Object(o) => Value::Object(o.into_iter().map(|(k, v)| (k, fixed_precision(v))).collect()),
        other => other,
    }
}

pub fn to_json_text(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(&fixed_precision(v.clone())).expect("serializable value");
    s.push('\n');
    s
}

fn e17(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn run_deflation(r: &DeflationRun) -> Result<DeflationReport> {
    let p = r.params.resolve();
    let fam = sphere_points(p.d, p.j)?;
    deflation_experiment(&p, &fam, &r.norm_spec(&p), r.n_times)
}

#[derive(Clone, Debug, Serialize)]
pub struct CollisionCheckReport {
    /// `‖Q⁺(M,M) − Q⁻(M,M)‖_∞ / ‖Q⁺(M,M)‖_∞` for a Maxwellian `M`.
    pub balance_gap: f64,
    /// Relative L² gap between direct and spectral gain, per random pair.
    pub spectral_gaps: Vec<f64>,
    /// `(n_v, residuals)` over the sweep.
    pub conservation: Vec<(usize, Invariants)>,
}

fn sample_slice(vg: &VelocityGrid, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..vg.len()).map(|i| f(&vg.point(i))).collect()
}

fn gaussian(center: &[f64], width: f64, v: &[f64]) -> f64 {
    let r2: f64 = v.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
    (-r2 / (2.0 * width * width)).exp()
}

fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

/// Random smooth pair number `index`: each field is a Gaussian with center in
/// `[-1/2, 1/2]^d` and width in `[0.6, 0.9]`.
pub fn random_pair(vg: &VelocityGrid, seed: u64, index: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut draw = || {
        let c: Vec<f64> = (0..vg.d).map(|_| rng.random_range(-0.5..0.5)).collect();
        let w = rng.random_range(0.6..0.9);
        sample_slice(vg, |v| gaussian(&c, w, v))
    };
    let f = draw();
    let g = draw();
    (f, g)
}

pub fn run_collision_check(r: &CollisionCheckRun, seed: u64) -> Result<CollisionCheckReport> {
    r.validate()?;
    let d = r.d;
    let sq = sphere_quadrature(d, r.sphere_order)?;
    let vg = VelocityGrid { d, n: r.n_v, l: r.l_v };
    let ops = VelocityOps::new(vg, &r.kernel, &sq)?;
    let maxwellian = sample_slice(&vg, |v| (-v.iter().map(|c| c * c).sum::<f64>()).exp());
    let gain = ops.gain_slice(&maxwellian, &maxwellian);
    let loss = ops.loss_slice(&maxwellian, &maxwellian);
    let top = gain.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let gap = gain.iter().zip(&loss).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    let balance_gap = gap / top;

    let eta = EtaRule::for_grid(&vg);
    let mut spectral_gaps = Vec::with_capacity(r.pairs);
    for i in 0..r.pairs as u64 {
        let (f, g) = random_pair(&vg, seed, i);
        let direct = ops.gain_slice(&f, &g);
        let spectral = gain_slice_spectral(&f, &g, &r.kernel, &vg, &sq, &eta)?;
        spectral_gaps.push(rel_l2(&spectral, &direct));
    }

    // Two offset Gaussians: far from equilibrium, constant in x.
    let mut conservation = Vec::with_capacity(r.sweep.len());
    for &n in &r.sweep {
        let grid = Grid::new(d, 8, 1.0, n, r.l_v)?;
        let a: Vec<f64> = (0..d).map(|i| if i == 0 { 0.6 } else { 0.0 }).collect();
        let b: Vec<f64> = (0..d).map(|i| if i == 1 { -0.5 } else { -0.3 }).collect();
        let f = DenseField::from_fn(&grid, |_, v| gaussian(&a, 0.6, v) + 0.5 * gaussian(&b, 0.8, v));
        conservation.push((n, collision_invariants(&PhaseField::Dense(f), &r.kernel, &grid, &sq)?));
    }
    Ok(CollisionCheckReport { balance_gap, spectral_gaps, conservation })
}

pub fn run_inequality_suite(r: &InequalityRun, seed: u64) -> Result<Vec<InequalityReport>> {
    r.kinds()?.into_iter().map(|k| check_inequality(&default_setup(k), r.trials, seed)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct WellposedReport {
    pub times: Vec<f64>,
    /// Sup-in-time L² distances between successive Picard iterates.
    pub distances: Vec<f64>,
    pub ratios: Vec<f64>,
    pub min_value: f64,
    pub mass: Vec<f64>,
}

pub fn run_wellposed(r: &WellposedRun) -> Result<WellposedReport> {
    r.validate()?;
    let grid = r.grid.build(2)?;
    let f0 = PhaseField::Dense(r.initial(&grid));
    let (traj, distances) = picard_local_solve(&f0, &r.kernel, r.t_end, r.n_steps, r.tol)?;
    let ratios = distances.windows(2).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0]).collect();
    let min_value = traj.fields.iter().flat_map(|f| &f.values).fold(f64::INFINITY, |m, &x| m.min(x));
    let cell = grid.h_x().powi(2) * grid.h_v().powi(2);
    let mass = traj.fields.iter().map(|f| f.values.iter().sum::<f64>() * cell).collect();
    Ok(WellposedReport { times: traj.times.clone(), distances, ratios, min_value, mass })
}

pub fn run_correction(r: &CorrectionRun) -> Result<Correction> {
    r.validate()?;
    let p = r.params.resolve();
    let grid = r.grid.build(p.d)?;
    let fam = sphere_points(p.d, p.j)?;
    let engine = Arc::new(BetaEngine::new(&p, &fam)?);
    solve_correction(&p, &engine, &grid, r.subintervals, r.steps, r.tol, r.forced_zero)
}

/// Summary JSON and named artifact files of one experiment.
pub struct Outcome {
    pub summary: Value,
    pub files: Vec<(String, String)>,
}

fn finite_or_divergence(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Divergence { message: format!("non-finite {what}"), history: values.to_vec() })
    }
}

/// Runs `command` on a validated configuration.
pub fn execute(command: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    let stem = command.stem();
    match command {
        Command::Deflation => {
            let rep = run_deflation(&cfg.deflation)?;
            finite_or_divergence("norm", &rep.norm_fa)?;
            let mut summary = rep.summary();
            summary["norm"] = serde_json::to_value(&rep.norm).expect("serializable norm");
            summary["times"] = json!(rep.times);
            summary["norm_fa"] = json!(rep.norm_fa);
            Ok(Outcome { summary, files: vec![(format!("{stem}.csv"), rep.to_csv())] })
        }
        Command::CollisionCheck => {
            let rep = run_collision_check(&cfg.collision_check, cfg.seed)?;
            let mut csv = String::from("check,n_v,index,value\n");
            csv.push_str(&format!("balance_gap,{},0,{}\n", cfg.collision_check.n_v, e17(rep.balance_gap)));
            for (i, g) in rep.spectral_gaps.iter().enumerate() {
                csv.push_str(&format!("spectral_gap,{},{i},{}\n", cfg.collision_check.n_v, e17(*g)));
            }
            for (n, inv) in &rep.conservation {
                csv.push_str(&format!("mass_residual,{n},0,{}\n", e17(inv.mass_residual)));
                csv.push_str(&format!("momentum_residual,{n},0,{}\n", e17(inv.momentum_residual)));
                csv.push_str(&format!("energy_residual,{n},0,{}\n", e17(inv.energy_residual)));
            }
            let summary = serde_json::to_value(&rep).expect("serializable report");
            Ok(Outcome { summary, files: vec![(format!("{stem}.csv"), csv)] })
        }
        Command::InequalitySuite => {
            let reps = run_inequality_suite(&cfg.inequality_suite, cfg.seed)?;
            let mut csv = String::from("kind,trials,seed,worst_ratio\n");
            for r in &reps {
                csv.push_str(&format!("{},{},{},{}\n", r.kind.name(), r.trials, r.seed, e17(r.worst_ratio)));
            }
            let summary = json!({ "reports": reps });
            Ok(Outcome { summary, files: vec![(format!("{stem}.csv"), csv)] })
        }
        Command::Wellposed => {
            let rep = run_wellposed(&cfg.wellposed)?;
            let mut csv = String::from("iteration,distance\n");
            for (i, x) in rep.distances.iter().enumerate() {
                csv.push_str(&format!("{},{}\n", i + 1, e17(*x)));
            }
            let summary = serde_json::to_value(&rep).expect("serializable report");
            Ok(Outcome { summary, files: vec![(format!("{stem}.csv"), csv)] })
        }
        Command::Correction => {
            let c = run_correction(&cfg.correction)?;
            let mut csv = String::from("t,z_fa,z_fc\n");
            for (i, t) in c.trajectory.times.iter().enumerate() {
                csv.push_str(&format!("{},{},{}\n", e17(*t), e17(c.z_fa[i]), e17(c.z_fc[i])));
            }
            let summary = json!({
                "params": cfg.correction.params.resolve(),
                "z_history": c.z_history,
                "growth_factors": c.growth_factors(),
                "subordination": c.subordination(),
                "picard_iterations": c.histories.iter().map(|h| h.len()).collect::<Vec<_>>(),
            });
            Ok(Outcome { summary, files: vec![(format!("{stem}.csv"), csv)] })
        }
    }
}

/// Process exit status for an error: 2 for anything caught before the
/// computation, 3 for divergence, 1 otherwise.
pub fn exit_code(e: &Error, validated: bool) -> i32 {
    match e {
        Error::Divergence { .. } => 3,
        _ if !validated => 2,
        _ => 1,
    }
}

fn log(stage: &str) {
    eprintln!("kdl: {stage}");
}

/// Parses arguments, runs the experiment and writes its artifacts.
pub fn run(cli: &Cli) -> i32 {
    let started = Instant::now();
    let prepared = (|| -> Result<(ExperimentConfig, PathBuf)> {
        if let Some(n) = cli.threads {
            if n == 0 {
                return Err(Error::Config("--threads must be >= 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        }
        let cfg = load_config(cli.config.as_deref(), &cli.set)?;
        cfg.validate(cli.command)?;
        let out = cli.out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("kdl-out"));
        fs::create_dir_all(&out)
            .map_err(|e| Error::Config(format!("output_dir {} is not writable: {e}", out.display())))?;
        let probe = out.join(".kdl-write-probe");
        fs::write(&probe, b"")
            .and_then(|_| fs::remove_file(&probe))
            .map_err(|e| Error::Config(format!("output_dir {} is not writable: {e}", out.display())))?;
        Ok((cfg, out))
    })();
    let (cfg, out) = match prepared {
        Ok(x) => x,
        Err(e) => {
            eprintln!("kdl: error: {e}");
            return exit_code(&e, false);
        }
    };
    log(&format!("validated config for {}", cli.command.name()));
    log(&format!("running {}", cli.command.name()));
    let outcome = match execute(cli.command, &cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("kdl: error: {e}");
            return exit_code(&e, true);
        }
    };
    let written = (|| -> Result<Vec<String>> {
        let mut names = Vec::new();
        let summary_name = format!("{}.json", cli.command.stem());
        fs::write(out.join(&summary_name), to_json_text(&outcome.summary))?;
        names.push(summary_name);
        for (name, text) in &outcome.files {
            fs::write(out.join(name), text)?;
            names.push(name.clone());
        }
        let manifest = json!({
            "command": cli.command.name(),
            "config": cfg,
            "overrides": cli.set,
            "config_file": cli.config.as_ref().map(|p| p.display().to_string()),
            "artifacts": names,
            "versions": { "kdl": env!("CARGO_PKG_VERSION") },
            "threads": rayon::current_num_threads(),
            "wall_time_s": started.elapsed().as_secs_f64(),
        });
        fs::write(out.join("manifest.json"), to_json_text(&manifest))?;
        Ok(names)
    })();
    match written {
        Ok(names) => {
            log(&format!("wrote {} and manifest.json to {}", names.join(", "), out.display()));
            0
        }
        Err(e) => {
            eprintln!("kdl: error: {e}");
            exit_code(&e, true)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_build_nested_entries() {
        let mut doc = json!({ "seed": 1 });
        apply_override(&mut doc, "deflation.params.M=8").unwrap();
        apply_override(&mut doc, "inequality_suite.kinds=[\"HLS\"]").unwrap();
        apply_override(&mut doc, "output_dir=runs/a").unwrap();
        assert_eq!(doc["deflation"]["params"]["M"].as_f64(), Some(8.0));
        assert_eq!(doc["inequality_suite"]["kinds"][0], "HLS");
        assert_eq!(doc["output_dir"], "runs/a");
        assert!(apply_override(&mut doc, "seed").is_err());
        assert!(apply_override(&mut doc, "seed.x=1").is_err());
        assert!(apply_override(&mut doc, "a..b=1").is_err());
    }

    #[test]
    fn config_rejects_unknown_and_invalid_entries() {
        assert!(matches!(load_config(None, &["sed=1".into()]), Err(Error::Config(_))));
        let cfg = load_config(None, &["deflation.params.gamma=-3".into()]).unwrap();
        let msg = cfg.validate(Command::Deflation).unwrap_err().to_string();
        assert!(msg.contains("-(d-1)/2"), "{msg}");
        let cfg = load_config(None, &["command=wellposed".into()]).unwrap();
        assert!(cfg.validate(Command::Deflation).is_err());
        assert!(cfg.validate(Command::Wellposed).is_ok());
        let cfg = load_config(None, &["inequality_suite.kinds=[\"Young\"]".into()]).unwrap();
        assert!(cfg.validate(Command::InequalitySuite).is_err());
        let cfg = load_config(None, &["correction.grid.l_x=1".into()]).unwrap();
        assert!(matches!(cfg.validate(Command::Correction), Err(Error::Grid(_))));
    }

    #[test]
    fn defaults_validate_for_every_command() {
        let cfg = ExperimentConfig::default();
        for c in [
            Command::Deflation,
            Command::CollisionCheck,
            Command::InequalitySuite,
            Command::Wellposed,
            Command::Correction,
        ] {
            cfg.validate(c).unwrap();
        }
    }

    #[test]
    fn floats_print_with_seventeen_digits() {
        let v = fixed_precision(json!({ "a": 0.1, "n": 3, "xs": [1.0, -2.5e-300] }));
        let text = serde_json::to_string(&v).unwrap();
        assert_eq!(text, r#"{"a":1.0000000000000001e-1,"n":3,"xs":[1.0000000000000000e+0,-2.5000000000000000e-300]}"#);
        let back: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(back["a"].as_f64(), Some(0.1));
    }

    #[test]
    fn exit_codes_by_stage() {
        let div = Error::Divergence { message: "x".into(), history: vec![] };
        assert_eq!(exit_code(&div, true), 3);
        assert_eq!(exit_code(&Error::Parameter("x".into()), false), 2);
        assert_eq!(exit_code(&Error::Parameter("x".into()), true), 1);
    }

    #[test]
    fn random_pairs_depend_only_on_seed_and_index() {
        let vg = VelocityGrid { d: 2, n: 8, l: 3.0 };
        assert_eq!(random_pair(&vg, 5, 2), random_pair(&vg, 5, 2));
        assert_ne!(random_pair(&vg, 5, 2), random_pair(&vg, 5, 3));
        assert_ne!(random_pair(&vg, 5, 2), random_pair(&vg, 6, 2));
    }
}
