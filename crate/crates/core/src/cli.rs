//! Command-line front end.
//!
//! A run is described by one JSON [`RunConfig`]. Individual fields can be
//! overridden with `--set dotted.path=value`, and the common knobs have their own
//! flags. Exit codes: 0 success, 1 a check or computation failed, 2 bad config.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Error;
use crate::lyapunov::{mean_power, residual_tolerance, solve_stationary_covariance, state_covariance};
use crate::model::{
    build_closed_loop, dimensional_power, draw_feasible, is_hurwitz, nondimensionalize, ControlGains, HarvesterParams,
    PhysicalParams, StateSpaceModel,
};
use crate::optimize::{
    figure_ke_grid, figure_km_grid, log_grid, maximize_gains, sweep, Evaluator, Method, OptimizerOptions, FIGURE_KE,
    FIGURE_KM,
};
use crate::sim::{
    energy_audit, ensemble_power, estimate_power, simulate, simulate_power, simulate_with, Scheme, Trajectory,
    DEFAULT_BURN_IN,
};
use crate::spectral::{harvested_power_paper_literal, harvested_power_spectral, QuadratureOptions, TransferMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "veh",
    version,
    about = "Stationary power of a piezoelectric harvester under white-noise excitation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// JSON run configuration; built-in defaults are used when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Override a config field, e.g. `--set gains.K_e=925`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,

    /// Output directory for written artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    pub method: Option<MethodArg>,

    #[arg(long = "transfer-mode", global = true, value_enum)]
    pub transfer_mode: Option<TransferArg>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Print J from the covariance and spectral routes for the configured gains.
    Evaluate,
    /// Evaluate J over a (K_m, K_e) grid and write `sweep.csv`.
    Sweep,
    /// Maximize J over the gains and write `optimize.json`.
    Optimize,
    /// Simulate one trajectory; write `trajectory.csv` and `power.json`.
    Simulate,
    /// Run the cross-method consistency checks and write `validate.txt`/`validate.json`.
    Validate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Lyapunov,
    Spectral,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransferArg {
    Statespace,
    Paper,
}

/// Dimensional plant plus the excitation intensity, converted to nondimensional
/// parameters before use.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalSpec {
    pub plant: PhysicalParams,
    #[serde(rename = "W")]
    pub w: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    #[default]
    Log,
    Linear,
}

/// Either an explicit list of values or `n` points from `lo` to `hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GridSpec {
    Values(Vec<f64>),
    Range {
        lo: f64,
        hi: f64,
        n: usize,
        #[serde(default)]
        spacing: Spacing,
    },
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        match self {
            GridSpec::Values(v) => v.clone(),
            GridSpec::Range { lo, hi, n, spacing } => match spacing {
                Spacing::Log => log_grid(*lo, *hi, *n),
                Spacing::Linear => {
                    if *n == 1 {
                        return vec![*lo];
                    }
                    (0..*n).map(|i| lo + (hi - lo) * i as f64 / (*n - 1) as f64).collect()
                }
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    #[serde(rename = "K_m")]
    pub km: GridSpec,
    #[serde(rename = "K_e")]
    pub ke: GridSpec,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            km: GridSpec::Values(FIGURE_KM.to_vec()),
            ke: GridSpec::Range {
                lo: 1.0,
                hi: 1e4,
                n: 200,
                spacing: Spacing::Log,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub h: f64,
    pub n_steps: usize,
    pub seed: u64,
    pub burn_in: f64,
    pub scheme: Scheme,
    /// Skip `trajectory.csv` for long runs when false.
    pub write_trajectory: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            h: 0.01,
            n_steps: 100_000,
            seed: 0,
            burn_in: DEFAULT_BURN_IN,
            scheme: Scheme::Exact,
            write_trajectory: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateConfig {
    pub seed: u64,
    pub mc_seeds: usize,
    pub mc_steps: usize,
    pub mc_h: f64,
    pub stability_draws: usize,
    pub audit_steps: usize,
}

impl Default for ValidateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mc_seeds: 20,
            mc_steps: 1_000_000,
            mc_h: 0.01,
            stability_draws: 1000,
            audit_steps: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<HarvesterParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub physical: Option<PhysicalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<ControlGains>,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub transfer_mode: TransferMode,
    #[serde(default)]
    pub quadrature: QuadratureOptions,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub optimizer: OptimizerOptions,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            params: Some(HarvesterParams::REFERENCE),
            physical: None,
            gains: Some(ControlGains::new(FIGURE_KM[0], FIGURE_KE[0])),
            method: Method::default(),
            transfer_mode: TransferMode::default(),
            quadrature: QuadratureOptions::default(),
            sweep: SweepConfig::default(),
            simulation: SimulationConfig::default(),
            optimizer: OptimizerOptions::default(),
            validate: ValidateConfig::default(),
            output_dir: default_output_dir(),
        }
    }
}

/// A failure to report, with the exit code it maps to.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: format!("config error: {}", message.into()),
        }
    }

    fn numeric(module: &str, err: Error) -> Self {
        Self {
            code: EXIT_FAILED,
            message: format!("{module}: {err}"),
        }
    }

    fn io(path: &Path, err: io::Error) -> Self {
        Self {
            code: EXIT_FAILED,
            message: format!("cannot write {}: {err}", path.display()),
        }
    }
}

impl RunConfig {
    /// Resolved nondimensional parameters.
    pub fn harvester(&self) -> Result<HarvesterParams, CliError> {
        match (&self.params, &self.physical) {
            (Some(p), None) => Ok(*p),
            (None, Some(phys)) => {
                nondimensionalize(&phys.plant, phys.w).map_err(|e| CliError::config(format!("physical: {e}")))
            }
            (None, None) => Ok(HarvesterParams::REFERENCE),
            (Some(_), Some(_)) => Err(CliError::config("give either `params` or `physical`, not both")),
        }
    }

    fn require_gains(&self) -> Result<ControlGains, CliError> {
        self.gains
            .ok_or_else(|| CliError::config("`gains` is required for this command"))
    }

    pub fn evaluator(&self) -> Evaluator {
        Evaluator {
            method: self.method,
            transfer_mode: self.transfer_mode,
            quadrature: self.quadrature,
        }
    }

    /// Checks every block against its module's invariants.
    pub fn validate(&self) -> Result<(), CliError> {
        let p = self.harvester()?;
        p.validate().map_err(|e| CliError::config(format!("params: {e}")))?;
        if let Some(g) = &self.gains {
            g.ensure_feasible()
                .map_err(|e| CliError::config(format!("gains: {e}")))?;
        }
        self.quadrature
            .validate()
            .map_err(|e| CliError::config(format!("quadrature: {e}")))?;
        for (name, grid) in [("sweep.K_m", &self.sweep.km), ("sweep.K_e", &self.sweep.ke)] {
            check_grid(name, grid)?;
        }
        for km in self.sweep.km.points() {
            for ke in self.sweep.ke.points() {
                ControlGains::new(km, ke)
                    .ensure_feasible()
                    .map_err(|e| CliError::config(format!("sweep: {e}")))?;
            }
        }
        let s = &self.simulation;
        if !(s.h > 0.0 && s.h.is_finite()) {
            return Err(CliError::config(format!("simulation.h: must be positive, got {}", s.h)));
        }
        if s.n_steps == 0 {
            return Err(CliError::config("simulation.n_steps: must be at least 1"));
        }
        if !(0.0..1.0).contains(&s.burn_in) {
            return Err(CliError::config(format!(
                "simulation.burn_in: must lie in [0, 1), got {}",
                s.burn_in
            )));
        }
        let o = &self.optimizer;
        if !(o.tolerance > 0.0) || !(o.initial_step > 0.0) || o.max_iterations == 0 {
            return Err(CliError::config(
                "optimizer: tolerance and initial_step must be positive, max_iterations at least 1",
            ));
        }
        let v = &self.validate;
        if !(v.mc_h > 0.0 && v.mc_h.is_finite()) || v.mc_steps == 0 || v.mc_seeds == 0 || v.audit_steps < 2 {
            return Err(CliError::config(
                "validate: mc_h must be positive; mc_steps, mc_seeds at least 1; audit_steps at least 2",
            ));
        }
        Ok(())
    }
}

fn check_grid(name: &str, grid: &GridSpec) -> Result<(), CliError> {
    match grid {
        GridSpec::Values(v) if v.is_empty() => Err(CliError::config(format!("{name}: empty value list"))),
        GridSpec::Values(v) if v.iter().any(|x| !x.is_finite()) => {
            Err(CliError::config(format!("{name}: non-finite value")))
        }
        GridSpec::Range { n: 0, .. } => Err(CliError::config(format!("{name}: n must be at least 1"))),
        GridSpec::Range { lo, hi, .. } if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
            Err(CliError::config(format!("{name}: need finite lo <= hi")))
        }
        GridSpec::Range {
            lo,
            spacing: Spacing::Log,
            ..
        } if *lo <= 0.0 => Err(CliError::config(format!("{name}: log spacing needs lo > 0"))),
        _ => Ok(()),
    }
}

/// Sets `path` (dot separated) inside `root` to `value`, creating objects on the way.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got `{assignment}`")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::config(format!("--set: malformed key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::config(format!("--set {key}: `{}` is not an object", parts[..depth].join("."))))?;
        if depth + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("key has at least one segment")
}

/// Reads the config file (or defaults), applies `--set` overrides and flags, and validates.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut root = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
            // typed parse of the raw text first: its errors carry line and column
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            let v: Value =
                serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(CliError::config(format!(
                    "{}: top level must be a JSON object",
                    path.display()
                )));
            }
            v
        }
        None => serde_json::to_value(RunConfig::default()).expect("default config serializes"),
    };
    if let Some(obj) = root.as_object_mut() {
        if !obj.contains_key("params") && !obj.contains_key("physical") {
            obj.insert(
                "params".into(),
                serde_json::to_value(HarvesterParams::REFERENCE).expect("params serialize"),
            );
        }
    }
    for s in &cli.set {
        apply_override(&mut root, s)?;
    }
    let source = cli
        .config
        .as_ref()
        .map_or_else(|| "built-in config".to_string(), |p| p.display().to_string());
    let mut cfg: RunConfig = serde_json::from_value(root).map_err(|e| CliError::config(format!("{source}: {e}")))?;
    if let Some(m) = cli.method {
        cfg.method = match m {
            MethodArg::Lyapunov => Method::Lyapunov,
            MethodArg::Spectral => Method::Spectral,
        };
    }
    if let Some(t) = cli.transfer_mode {
        cfg.transfer_mode = match t {
            TransferArg::Statespace => TransferMode::Statespace,
            TransferArg::Paper => TransferMode::Paper,
        };
    }
    if let Some(seed) = cli.seed {
        cfg.simulation.seed = seed;
        cfg.validate.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `argv` (including the program name) and runs the command, writing
/// human-readable output to `out` and diagnostics to `err`.
pub fn run_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let target: &mut dyn Write = if e.use_stderr() { err } else { out };
            let _ = write!(target, "{}", e.render());
            return code;
        }
    };
    match load_config(&cli).and_then(|cfg| dispatch(cli.command, &cfg, out)) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = io::stdout();
    let stderr = io::stderr();
    run_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

fn dispatch(command: Command, cfg: &RunConfig, out: &mut dyn Write) -> Result<i32, CliError> {
    match command {
        Command::Evaluate => cmd_evaluate(cfg, out),
        Command::Sweep => cmd_sweep(cfg, out),
        Command::Optimize => cmd_optimize(cfg, out),
        Command::Simulate => cmd_simulate(cfg, out),
        Command::Validate => cmd_validate(cfg, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<(), CliError> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io(Path::new("<stdout>"), e))
}

fn output_file(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    Ok(cfg.output_dir.join(name))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("result types serialize");
    s.push('\n');
    s
}

fn cmd_evaluate(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32, CliError> {
    let p = cfg.harvester()?;
    let g = cfg.require_gains()?;
    let m = build_closed_loop(&p, &g).map_err(|e| CliError::numeric("model", e))?;
    let j_lyap = mean_power(&m, p.w).map_err(|e| CliError::numeric("lyapunov", e))?;
    let spectral = match cfg.transfer_mode {
        TransferMode::Statespace => harvested_power_spectral(&m, p.w, &cfg.quadrature),
        TransferMode::Paper => harvested_power_paper_literal(&p, &g, p.w, &cfg.quadrature),
    }
    .map_err(|e| CliError::numeric("spectral", e))?;
    let rel = (j_lyap - spectral.j).abs() / j_lyap.abs().max(f64::MIN_POSITIVE);

    let mut s = String::new();
    let _ = writeln!(s, "K_m = {:.16e}", g.km);
    let _ = writeln!(s, "K_e = {:.16e}", g.ke);
    let _ = writeln!(s, "J lyapunov = {j_lyap:.16e}");
    let _ = writeln!(
        s,
        "J spectral ({}) = {:.16e}",
        transfer_label(cfg.transfer_mode),
        spectral.j
    );
    let _ = writeln!(s, "relative difference = {rel:.3e}");
    match harvested_power_paper_literal(&p, &g, p.w, &cfg.quadrature) {
        Ok(lit) => {
            let _ = writeln!(s, "paper-literal unnormalized integral = {:.16e}", lit.unnormalized);
        }
        Err(e) => {
            let _ = writeln!(s, "paper-literal unnormalized integral unavailable: spectral: {e}");
        }
    }
    if let Some(phys) = &cfg.physical {
        let dim = dimensional_power(j_lyap, &phys.plant).map_err(|e| CliError::numeric("model", e))?;
        let _ = writeln!(s, "dimensional power (W) = {dim:.16e}");
    }
    emit(out, &s)?;
    Ok(EXIT_OK)
}

fn transfer_label(mode: TransferMode) -> &'static str {
    match mode {
        TransferMode::Statespace => "statespace",
        TransferMode::Paper => "paper",
    }
}

fn cmd_sweep(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32, CliError> {
    let p = cfg.harvester()?;
    let km = cfg.sweep.km.points();
    let ke = cfg.sweep.ke.points();
    let result = sweep(&p, &km, &ke, &cfg.evaluator()).map_err(|e| CliError::numeric("optimize", e))?;
    let path = output_file(cfg, "sweep.csv")?;
    let mut buf = Vec::new();
    result.write_csv(&mut buf, &p).map_err(|e| CliError::io(&path, e))?;
    write_file(&path, &buf)?;

    let mut s = String::new();
    let _ = writeln!(s, "method = {}", result.method);
    let _ = writeln!(s, "cells = {} ({} failed)", km.len() * ke.len(), result.failures.len());
    if let Some((i, k)) = result.argmax() {
        let _ = writeln!(
            s,
            "argmax: K_m = {:.6e}, K_e = {:.6e}, J = {:.6e}",
            km[i], ke[k], result.j[i][k]
        );
    }
    if ke.len() > 1 {
        for (i, &row_km) in km.iter().enumerate() {
            if let Some(k) = result.argmax_over_ke(i) {
                let _ = writeln!(
                    s,
                    "K_m = {row_km:.6e}: best K_e = {:.6e}{}",
                    ke[k],
                    edge_note(k, ke.len())
                );
            }
        }
    }
    if km.len() > 1 && ke.len() <= 16 {
        for (k, &col_ke) in ke.iter().enumerate() {
            if let Some(i) = result.argmax_over_km(k) {
                let _ = writeln!(
                    s,
                    "K_e = {col_ke:.6e}: best K_m = {:.6e}{}",
                    km[i],
                    edge_note(i, km.len())
                );
            }
        }
    }
    let _ = writeln!(s, "wrote {}", path.display());
    emit(out, &s)?;
    Ok(if result.failures.is_empty() {
        EXIT_OK
    } else {
        EXIT_FAILED
    })
}

fn edge_note(index: usize, len: usize) -> &'static str {
    if index == 0 || index + 1 == len {
        " (grid end)"
    } else {
        ""
    }
}

fn cmd_optimize(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32, CliError> {
    let p = cfg.harvester()?;
    let init = cfg.gains.unwrap_or(ControlGains::new(1.0, 0.0));
    let result = maximize_gains(&p, &init, &cfg.optimizer).map_err(|e| CliError::numeric("optimize", e))?;
    let path = output_file(cfg, "optimize.json")?;
    write_file(&path, to_json(&result).as_bytes())?;
    let mut s = String::new();
    let _ = writeln!(s, "K_m* = {:.16e}", result.gains_star.km);
    let _ = writeln!(s, "K_e* = {:.16e}", result.gains_star.ke);
    let _ = writeln!(s, "J* = {:.16e}", result.j_star);
    let _ = writeln!(
        s,
        "iterations = {}, converged = {}",
        result.iterations, result.converged
    );
    let _ = writeln!(s, "wrote {}", path.display());
    emit(out, &s)?;
    Ok(if result.converged { EXIT_OK } else { EXIT_FAILED })
}

fn cmd_simulate(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32, CliError> {
    let p = cfg.harvester()?;
    let g = cfg.require_gains()?;
    let sc = &cfg.simulation;
    let m = build_closed_loop(&p, &g).map_err(|e| CliError::numeric("model", e))?;
    let (estimate, trajectory) = if sc.write_trajectory || sc.scheme != Scheme::Exact {
        let t =
            simulate_with(&m, p.w, sc.h, sc.n_steps, sc.seed, sc.scheme).map_err(|e| CliError::numeric("sim", e))?;
        let e = estimate_power(&t, sc.burn_in).map_err(|e| CliError::numeric("sim", e))?;
        (e, Some(t))
    } else {
        let e =
            simulate_power(&m, p.w, sc.h, sc.n_steps, sc.seed, sc.burn_in).map_err(|e| CliError::numeric("sim", e))?;
        (e, None)
    };
    let mut s = String::new();
    if let Some(t) = trajectory.as_ref().filter(|_| sc.write_trajectory) {
        let path = output_file(cfg, "trajectory.csv")?;
        let mut buf = Vec::new();
        t.write_csv(&mut buf, Some(&p)).map_err(|e| CliError::io(&path, e))?;
        write_file(&path, &buf)?;
        let _ = writeln!(s, "wrote {}", path.display());
    }
    let path = output_file(cfg, "power.json")?;
    write_file(&path, to_json(&estimate).as_bytes())?;
    let j_lyap = mean_power(&m, p.w).map_err(|e| CliError::numeric("lyapunov", e))?;
    let _ = writeln!(
        s,
        "J simulated = {:.16e} +/- {:.3e} (batch means, {} batches)",
        estimate.mean, estimate.std_error, estimate.batches
    );
    let _ = writeln!(s, "J lyapunov = {j_lyap:.16e}");
    let _ = writeln!(
        s,
        "deviation = {:.3} standard errors",
        (estimate.mean - j_lyap) / estimate.std_error
    );
    let _ = writeln!(s, "wrote {}", path.display());
    emit(out, &s)?;
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// Reported for reference; does not affect the exit code.
    Info,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn render(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.checks {
            let tag = match c.status {
                Status::Pass => "PASS",
                Status::Fail => "FAIL",
                Status::Info => "INFO",
            };
            let _ = writeln!(s, "{tag}  {:<width$}  {}", c.name, c.detail);
        }
        let counted = self.checks.iter().filter(|c| c.status != Status::Info).count();
        let passed = self.checks.iter().filter(|c| c.status == Status::Pass).count();
        let _ = writeln!(s, "{passed}/{counted} checks passed");
        s
    }
}

struct Checks(Vec<Check>);

impl Checks {
    fn push(&mut self, name: impl Into<String>, ok: bool, detail: impl Into<String>) {
        self.0.push(Check {
            name: name.into(),
            status: if ok { Status::Pass } else { Status::Fail },
            detail: detail.into(),
        });
    }

    fn info(&mut self, name: impl Into<String>, detail: impl Into<String>) {
        self.0.push(Check {
            name: name.into(),
            status: Status::Info,
            detail: detail.into(),
        });
    }

    fn error(&mut self, name: impl Into<String>, module: &str, e: Error) {
        self.push(name, false, format!("{module}: {e}"));
    }
}

/// Runs the consistency suite for `cfg`. Deterministic for a fixed config.
pub fn validation_report(cfg: &RunConfig) -> Result<ValidationReport, CliError> {
    let p = cfg.harvester()?;
    let v = &cfg.validate;
    let mut checks = Checks(Vec::new());

    for &km in &FIGURE_KM {
        for &ke in &FIGURE_KE {
            let name = format!("lyapunov_vs_spectral K_m={km} K_e={ke}");
            let g = ControlGains::new(km, ke);
            let pair = build_closed_loop(&p, &g).and_then(|m| {
                let a = mean_power(&m, p.w)?;
                let b = harvested_power_spectral(&m, p.w, &cfg.quadrature)?.j;
                Ok((a, b))
            });
            match pair {
                Ok((a, b)) => {
                    let rel = (a - b).abs() / a;
                    checks.push(name, rel <= 1e-6, format!("J = {a:.9e}, rel diff {rel:.2e} (tol 1e-6)"));
                }
                Err(e) => checks.error(name, "lyapunov/spectral", e),
            }
        }
    }

    analytic_checks(&mut checks);

    if let Some(g) = cfg.gains {
        let name = "lyapunov_residual";
        match build_closed_loop(&p, &g).and_then(|m| state_covariance(&m, p.w).map(|c| (m, c))) {
            Ok((m, c)) => {
                let q = &m.b_xi * m.b_xi.transpose() * p.w;
                let tol = residual_tolerance(&m.a, &c.p, &q);
                checks.push(
                    name,
                    c.residual_norm <= tol,
                    format!("residual {:.2e} (tol {tol:.2e})", c.residual_norm),
                );
            }
            Err(e) => checks.error(name, "lyapunov", e),
        }
    }

    monte_carlo_check(&mut checks, &p, v);
    stability_check(&mut checks, v);
    audit_check(&mut checks, &p, v);
    optimizer_check(&mut checks, &p, cfg);
    determinism_check(&mut checks, &p, v);
    figure_shape_info(&mut checks, &p);

    let passed = checks.0.iter().all(|c| c.status != Status::Fail);
    Ok(ValidationReport {
        checks: checks.0,
        passed,
    })
}

fn analytic_checks(checks: &mut Checks) {
    let scalar = [(1.0, 1.0), (0.3, 2.5), (17.0, 0.01)];
    let mut worst = 0.0f64;
    let mut failure = None;
    for (a, w) in scalar {
        match solve_stationary_covariance(&DMatrix::from_element(1, 1, -a), &DMatrix::from_element(1, 1, w)) {
            Ok(r) => worst = worst.max((r.p[(0, 0)] - w / (2.0 * a)).abs()),
            Err(e) => failure = Some(e),
        }
    }
    match failure {
        Some(e) => checks.error("scalar_oracle", "lyapunov", e),
        None => checks.push(
            "scalar_oracle",
            worst <= 1e-12,
            format!("max |P - W/(2a)| = {worst:.2e} (tol 1e-12)"),
        ),
    }

    let mut worst_var = 0.0f64;
    let mut worst_spec = 0.0f64;
    let mut failure = None;
    for (zeta, w) in [(0.05, 1.0), (0.01, 3.0), (0.7, 0.2)] {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -2.0 * zeta]);
        let b = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let exact = w / (4.0 * zeta);
        let result = StateSpaceModel::generic(a, b, c).and_then(|m| {
            let var = mean_power(&m, w)?;
            let spec = harvested_power_spectral(&m, w, &QuadratureOptions::default())?.j;
            Ok((var, spec))
        });
        match result {
            Ok((var, spec)) => {
                worst_var = worst_var.max((var - exact).abs());
                worst_spec = worst_spec.max((spec - exact).abs() / exact);
            }
            Err(e) => failure = Some(e),
        }
    }
    match failure {
        Some(e) => checks.error("oscillator_oracle", "lyapunov/spectral", e),
        None => {
            checks.push(
                "oscillator_oracle",
                worst_var <= 1e-12,
                format!("max |Var(x) - W/(4 zeta)| = {worst_var:.2e} (tol 1e-12)"),
            );
            checks.push(
                "spectral_normalization",
                worst_spec <= 1e-8,
                format!("max rel error {worst_spec:.2e} (tol 1e-8)"),
            );
        }
    }
}

fn monte_carlo_check(checks: &mut Checks, p: &HarvesterParams, v: &ValidateConfig) {
    let name = "monte_carlo K_m=0.3 K_e=925";
    let g = ControlGains::new(0.3, 925.0);
    let run = build_closed_loop(p, &g).and_then(|m| {
        let j = mean_power(&m, p.w)?;
        let members = ensemble_power(&m, p.w, v.mc_h, v.mc_steps, v.seed, v.mc_seeds, DEFAULT_BURN_IN)?;
        Ok((j, members))
    });
    match run {
        Ok((j, members)) => {
            let within = members
                .iter()
                .filter(|(_, e)| (e.mean - j).abs() <= 3.0 * e.std_error)
                .count();
            let required = v.mc_seeds - v.mc_seeds / 20;
            checks.push(
                name,
                within >= required,
                format!(
                    "{within}/{} seeds within 3 SE of J = {j:.6e} (need {required}; {} steps, h = {})",
                    v.mc_seeds, v.mc_steps, v.mc_h
                ),
            );
        }
        Err(e) => checks.error(name, "sim", e),
    }
}

fn stability_check(checks: &mut Checks, v: &ValidateConfig) {
    let name = "stability_draws";
    let mut rng = ChaCha12Rng::seed_from_u64(v.seed);
    let mut worst = f64::NEG_INFINITY;
    let mut counterexample = None;
    for _ in 0..v.stability_draws {
        let (p, g) = draw_feasible(&mut rng);
        match build_closed_loop(&p, &g).and_then(|m| is_hurwitz(&m)) {
            Ok(s) => {
                worst = worst.max(s.margin);
                if !s.stable && counterexample.is_none() {
                    counterexample = Some(format!("{p:?} {g:?}"));
                }
            }
            Err(e) => {
                if counterexample.is_none() {
                    counterexample = Some(format!("{p:?} {g:?}: {e}"));
                }
            }
        }
    }
    match counterexample {
        None => checks.push(
            name,
            true,
            format!(
                "{} draws Hurwitz, worst spectral abscissa {worst:.3e}",
                v.stability_draws
            ),
        ),
        Some(c) => checks.push(name, false, format!("counterexample: {c}")),
    }
}

/// Keeps every `factor`-th state, so the coarse path samples the fine one.
fn subsample(t: &Trajectory, factor: usize) -> crate::Result<Trajectory> {
    let states: Vec<f64> = t.states().step_by(factor).flatten().copied().collect();
    Trajectory::from_states(t.step * factor as f64, t.dim(), states, t.loop_status)
}

fn audit_check(checks: &mut Checks, p: &HarvesterParams, v: &ValidateConfig) {
    let name = "energy_audit K_m=0.1 K_e=900";
    let g = ControlGains::new(0.1, 900.0);
    let run = build_closed_loop(p, &g).and_then(|m| {
        let fine = simulate(&m, p.w, 1e-3, v.audit_steps, v.seed)?;
        let coarse = subsample(&fine, 2)?;
        Ok((energy_audit(&fine, p, &g)?, energy_audit(&coarse, p, &g)?))
    });
    match run {
        Ok((fine, coarse)) => {
            let worst = fine.mech_residual.max(fine.elec_residual);
            checks.push(
                name,
                worst <= 1e-2,
                format!(
                    "h = 1e-3: mech {:.2e}, elec {:.2e} (tol 1e-2)",
                    fine.mech_residual, fine.elec_residual
                ),
            );
            let order = |c: f64, f: f64| (c / f).log2();
            checks.info(
                "energy_audit_order",
                format!(
                    "h 2e-3 -> 1e-3 observed order: mech {:.2}, elec {:.2}",
                    order(coarse.mech_residual, fine.mech_residual),
                    order(coarse.elec_residual, fine.elec_residual)
                ),
            );
        }
        Err(e) => checks.error(name, "sim", e),
    }
}

fn optimizer_check(checks: &mut Checks, p: &HarvesterParams, cfg: &RunConfig) {
    let name = "optimizer";
    let init = cfg.gains.unwrap_or(ControlGains::new(1.0, 0.0));
    let run = maximize_gains(p, &init, &cfg.optimizer).and_then(|r| {
        let mut best_pair = f64::NEG_INFINITY;
        for &km in &FIGURE_KM {
            for &ke in &FIGURE_KE {
                best_pair = best_pair.max(mean_power(&build_closed_loop(p, &ControlGains::new(km, ke))?, p.w)?);
            }
        }
        Ok((r, best_pair))
    });
    match run {
        Ok((r, best_pair)) => {
            let agree = r
                .starts
                .iter()
                .filter(|s| (s.j - r.j_star).abs() <= 1e-6 * r.j_star)
                .count();
            checks.push(
                name,
                r.converged && r.j_star >= best_pair,
                format!(
                    "J* = {:.9e} at K_m = {:.6e}, K_e = {:.6e}; {agree}/{} starts agree",
                    r.j_star,
                    r.gains_star.km,
                    r.gains_star.ke,
                    r.starts.len()
                ),
            );
        }
        Err(e) => checks.error(name, "optimize", e),
    }
}

fn determinism_check(checks: &mut Checks, p: &HarvesterParams, v: &ValidateConfig) {
    let name = "determinism";
    let g = ControlGains::new(0.3, 925.0);
    let steps = v.mc_steps.min(100_000);
    let run = build_closed_loop(p, &g).and_then(|m| {
        let a = simulate(&m, p.w, v.mc_h, steps, v.seed)?;
        let b = simulate(&m, p.w, v.mc_h, steps, v.seed)?;
        let streamed = simulate_power(&m, p.w, v.mc_h, steps, v.seed, DEFAULT_BURN_IN)?;
        let stored = estimate_power(&a, DEFAULT_BURN_IN)?;
        Ok((a == b, streamed == stored))
    });
    match run {
        Ok((paths, estimates)) => checks.push(
            name,
            paths && estimates,
            format!("repeat path identical: {paths}; streamed estimate identical: {estimates}"),
        ),
        Err(e) => checks.error(name, "sim", e),
    }
}

fn figure_shape_info(checks: &mut Checks, p: &HarvesterParams) {
    let evaluator = Evaluator::lyapunov();
    let ke = figure_ke_grid();
    let km = figure_km_grid();
    match sweep(p, &FIGURE_KM, &ke, &evaluator) {
        Ok(r) => {
            let parts: Vec<String> = FIGURE_KM
                .iter()
                .enumerate()
                .map(|(i, km)| match r.argmax_over_ke(i) {
                    Some(k) => format!("K_m={km}: K_e={:.4e}{}", ke[k], edge_note(k, ke.len())),
                    None => format!("K_m={km}: none"),
                })
                .collect();
            checks.info("argmax_over_K_e", parts.join("; "));
        }
        Err(e) => checks.info("argmax_over_K_e", format!("optimize: {e}")),
    }
    match sweep(p, &km, &FIGURE_KE, &evaluator) {
        Ok(r) => {
            let parts: Vec<String> = FIGURE_KE
                .iter()
                .enumerate()
                .map(|(k, ke)| match r.argmax_over_km(k) {
                    Some(i) => format!("K_e={ke}: K_m={:.4e}{}", km[i], edge_note(i, km.len())),
                    None => format!("K_e={ke}: none"),
                })
                .collect();
            checks.info("argmax_over_K_m", parts.join("; "));
        }
        Err(e) => checks.info("argmax_over_K_m", format!("optimize: {e}")),
    }
}

fn cmd_validate(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32, CliError> {
    let report = validation_report(cfg)?;
    let text = report.render();
    let txt = output_file(cfg, "validate.txt")?;
    write_file(&txt, text.as_bytes())?;
    let json = output_file(cfg, "validate.json")?;
    write_file(&json, to_json(&report).as_bytes())?;
    emit(out, &text)?;
    Ok(if report.passed { EXIT_OK } else { EXIT_FAILED })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn override_creates_nested_keys() {
        let mut v = serde_json::json!({"gains": {"K_m": 1.0, "K_e": 2.0}});
        apply_override(&mut v, "gains.K_e=925").unwrap();
        apply_override(&mut v, "simulation.scheme=euler_maruyama").unwrap();
        assert_eq!(v["gains"]["K_e"], serde_json::json!(925));
        assert_eq!(v["simulation"]["scheme"], serde_json::json!("euler_maruyama"));
        assert!(apply_override(&mut v, "gains").is_err());
        assert!(apply_override(&mut v, "gains.K_e.x=1").is_err());
    }

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn evaluate_agrees() {
        let (code, out, _) = run_capture(&["veh", "evaluate"]);
        assert_eq!(code, EXIT_OK);
        let rel: f64 = out
            .lines()
            .find_map(|l| l.strip_prefix("relative difference = "))
            .unwrap()
            .parse()
            .unwrap();
        assert!(rel <= 1e-6);
        assert!(out.contains("paper-literal unnormalized integral"));
    }

    #[test]
    fn infeasible_gain_is_config_error() {
        let (code, _, err) = run_capture(&["veh", "evaluate", "--set", "gains.K_e=-2"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.contains("K_e > -1"), "{err}");
    }

    #[test]
    fn unknown_key_is_rejected() {
        let (code, _, err) = run_capture(&["veh", "evaluate", "--set", "gainz.K_e=2"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.contains("gainz"), "{err}");
    }

    #[test]
    fn bad_flag_value_is_config_error() {
        let (code, _, _) = run_capture(&["veh", "evaluate", "--method", "galerkin"]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn grid_specs() {
        let g: GridSpec = serde_json::from_str(r#"{"lo": 1, "hi": 100, "n": 3}"#).unwrap();
        let pts = g.points();
        assert_eq!(pts.len(), 3);
        assert!((pts[1] - 10.0).abs() < 1e-12);
        let g: GridSpec = serde_json::from_str(r#"{"lo": 0, "hi": 1, "n": 5, "spacing": "linear"}"#).unwrap();
        assert_eq!(g.points(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert!(check_grid("x", &GridSpec::Values(vec![])).is_err());
        let bad = GridSpec::Range {
            lo: 0.0,
            hi: 1.0,
            n: 3,
            spacing: Spacing::Log,
        };
        assert!(check_grid("x", &bad).is_err());
    }
}
