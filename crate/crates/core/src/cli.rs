// SPDX-License-Identifier: Apache-2.0

//! Batch runner: config resolution, experiment dispatch and CSV/JSON/SVG output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::Parser;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::diagnostics::{
    bridge_local_error_study, epsilon_sweep, hamiltonian_energy, linear_fit, linspace,
    moment_comparison, stability_scan, strong_convergence_study, DiagnosticsError, LinearFit,
    MomentRun, Observable, ReferenceSpec, StudySpec,
};
use crate::integrators::{
    integrate, IntegrateOptions, IntegratorError, Method, Noise, NoiseMode, StepPlan, Stepper,
    Trajectory,
};
use crate::model::{CheckedSystem, State};
use crate::noise::PathStream;
use crate::parallel::map_paths;
use crate::plot::{Plot, Series};
use crate::problems::{
    build_fpu, build_harmonic, build_two_spring, fpu_observables, snap_resonant, Coupling,
    FpuConfig, HarmonicConfig, ProblemError, Resonance, TwoSpringConfig,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("unknown problem '{0}'")]
    UnknownProblem(String),
    #[error("unknown method '{0}'")]
    UnknownMethod(String),
    #[error("missing field '{0}'")]
    MissingField(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
}

/// Command-line flags. Every flag overrides the matching config-file value.
#[derive(Debug, Clone, Default, Parser)]
#[command(name = "stiffsim", version, about = "Stochastic impulse integrators for stiff systems")]
pub struct CliArgs {
    /// JSON or TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// simulate, converge, moments, fpu-demo, stability-scan or lemma-check.
    #[arg(long)]
    pub command: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write SVG plots.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Converge,
    Moments,
    FpuDemo,
    StabilityScan,
    LemmaCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Converge => "converge",
            Command::Moments => "moments",
            Command::FpuDemo => "fpu-demo",
            Command::StabilityScan => "stability-scan",
            Command::LemmaCheck => "lemma-check",
        }
    }
}

impl FromStr for Command {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        let all = [
            Command::Simulate,
            Command::Converge,
            Command::Moments,
            Command::FpuDemo,
            Command::StabilityScan,
            Command::LemmaCheck,
        ];
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        all.into_iter()
            .find(|c| c.name() == key)
            .ok_or_else(|| CliError::InvalidConfig(format!("unknown command '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum ProblemConfig {
    TwoSpring(TwoSpringConfig),
    Fpu(FpuConfig),
    Harmonic(HarmonicConfig),
}

impl ProblemConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemConfig::TwoSpring(_) => "two-spring",
            ProblemConfig::Fpu(_) => "fpu",
            ProblemConfig::Harmonic(_) => "harmonic",
        }
    }

    pub fn omega(&self) -> f64 {
        match self {
            ProblemConfig::TwoSpring(c) => c.omega,
            ProblemConfig::Fpu(c) => c.omega,
            ProblemConfig::Harmonic(c) => c.omega,
        }
    }

    pub fn with_omega(&self, omega: f64) -> Self {
        match self {
            ProblemConfig::TwoSpring(c) => ProblemConfig::TwoSpring(c.clone().with_omega(omega)),
            ProblemConfig::Fpu(c) => ProblemConfig::Fpu(c.clone().with_omega(omega)),
            ProblemConfig::Harmonic(c) => ProblemConfig::Harmonic(c.clone().with_omega(omega)),
        }
    }

    pub fn build(&self) -> Result<CheckedSystem, ProblemError> {
        match self {
            ProblemConfig::TwoSpring(c) => build_two_spring(c),
            ProblemConfig::Fpu(c) => build_fpu(c),
            ProblemConfig::Harmonic(c) => build_harmonic(c),
        }
    }

    pub fn initial_state(&self) -> State {
        match self {
            ProblemConfig::TwoSpring(c) => c.initial_state(),
            ProblemConfig::Fpu(c) => c.initial_state(),
            ProblemConfig::Harmonic(c) => c.initial_state(),
        }
    }

    /// `"fpu"` or `{ name = "fpu", omega = 100, .. }`
    pub fn from_value(value: &Value) -> Result<Self, CliError> {
        let (name, mut params) = match value {
            Value::String(s) => (s.clone(), Map::new()),
            Value::Object(map) => {
                let mut map = map.clone();
                let name = match map.remove("name") {
                    Some(Value::String(s)) => s,
                    Some(_) => return Err(CliError::InvalidConfig("problem.name must be a string".into())),
                    None => return Err(CliError::MissingField("problem.name".into())),
                };
                (name, map)
            }
            _ => return Err(CliError::InvalidConfig("problem must be a name or a table".into())),
        };
        let invalid = |e: serde_json::Error| CliError::InvalidConfig(format!("problem '{name}': {e}"));
        params.retain(|_, v| !v.is_null());
        let params = Value::Object(std::mem::take(&mut params));
        match name.as_str() {
            "two-spring" => Ok(ProblemConfig::TwoSpring(serde_json::from_value(params).map_err(invalid)?)),
            "fpu" => Ok(ProblemConfig::Fpu(serde_json::from_value(params).map_err(invalid)?)),
            "harmonic" => Ok(ProblemConfig::Harmonic(serde_json::from_value(params).map_err(invalid)?)),
            _ => Err(CliError::UnknownProblem(name)),
        }
    }
}

/// Config file contents before defaults are applied.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub command: Option<String>,
    pub problem: Option<Value>,
    pub method: Option<String>,
    pub h: Option<f64>,
    pub h_grid: Option<Vec<f64>>,
    pub t_end: Option<f64>,
    pub paths: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub svg: Option<bool>,
    pub reference_factor: Option<f64>,
    pub sweep_omegas: Option<Vec<f64>>,
    pub sweep_h: Option<f64>,
    pub resonances: Option<Vec<Resonance>>,
    pub baseline_factor: Option<f64>,
    pub h_range: Option<[f64; 2]>,
    pub samples: Option<usize>,
}

/// Fully resolved run configuration, echoed to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub problem: ProblemConfig,
    pub method: Method,
    /// Macro step (simulate, moments, fpu-demo).
    pub h: f64,
    /// Strictly decreasing macro steps (converge, lemma-check).
    pub h_grid: Vec<f64>,
    pub t_end: f64,
    pub paths: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub svg: bool,
    /// Fine reference step in units of `1 / omega`.
    pub reference_factor: f64,
    pub sweep_omegas: Vec<f64>,
    pub sweep_h: f64,
    pub resonances: Vec<Resonance>,
    /// Baseline fine step in units of `1 / omega`.
    pub baseline_factor: f64,
    pub h_range: [f64; 2],
    pub samples: usize,
}

const DEFAULT_GRID: [f64; 4] = [0.1, 0.05, 0.025, 0.0125];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Toml,
}

impl Format {
    pub fn from_path(path: &Path, text: &str) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            Some("toml") => Format::Toml,
            _ if text.trim_start().starts_with('{') => Format::Json,
            _ => Format::Toml,
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

pub fn parse_raw(text: &str, format: Format) -> Result<RawConfig, CliError> {
    match format {
        Format::Json => serde_json::from_str(text).map_err(|e| CliError::ParseError {
            line: e.line(),
            message: e.to_string(),
        }),
        Format::Toml => toml::from_str(text).map_err(|e| CliError::ParseError {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        }),
    }
}

fn parse_method(name: &str) -> Result<Method, CliError> {
    Method::from_str(name).map_err(|_| CliError::UnknownMethod(name.to_string()))
}

/// Applies flag overrides and per-command defaults.
pub fn resolve(mut raw: RawConfig, args: &CliArgs) -> Result<RunConfig, CliError> {
    if let Some(c) = &args.command {
        raw.command = Some(c.clone());
    }
    if args.seed.is_some() {
        raw.seed = args.seed;
    }
    if args.paths.is_some() {
        raw.paths = args.paths;
    }
    if args.out.is_some() {
        raw.out = args.out.clone();
    }
    if args.svg {
        raw.svg = Some(true);
    }
    let command: Command = raw
        .command
        .as_deref()
        .ok_or_else(|| CliError::MissingField("command".into()))?
        .parse()?;

    let default_problem = match command {
        Command::Simulate => None,
        Command::Converge | Command::Moments | Command::LemmaCheck => {
            Some(ProblemConfig::TwoSpring(TwoSpringConfig::default()))
        }
        Command::FpuDemo => Some(ProblemConfig::Fpu(FpuConfig::default())),
        Command::StabilityScan => Some(ProblemConfig::Harmonic(HarmonicConfig {
            coupling: Coupling::Quadratic { k: 1.0 },
            ..HarmonicConfig::default()
        })),
    };
    let problem = match &raw.problem {
        Some(v) => ProblemConfig::from_value(v)?,
        None => default_problem.ok_or_else(|| CliError::MissingField("problem".into()))?,
    };
    let stochastic = !problem.build()?.is_deterministic();

    let method = match (&raw.method, command) {
        (Some(m), _) => parse_method(m)?,
        (None, Command::Simulate) => return Err(CliError::MissingField("method".into())),
        (None, Command::Moments | Command::LemmaCheck) => Method::Sim1Langevin,
        (None, Command::FpuDemo | Command::StabilityScan) => Method::Sim1Hamiltonian,
        (None, Command::Converge) if stochastic => Method::Sim1Langevin,
        (None, Command::Converge) => Method::Sim1Hamiltonian,
    };
    let (t_end, paths) = match command {
        Command::Simulate => (1.0, 1),
        Command::Converge => (1.0, 200),
        Command::Moments => (5.0, 5000),
        Command::FpuDemo => (1000.0, 1),
        Command::StabilityScan => (100.0, 1),
        Command::LemmaCheck => (1.0, 1000),
    };
    let cfg = RunConfig {
        command,
        problem,
        method,
        h: raw.h.unwrap_or(0.1),
        h_grid: raw.h_grid.unwrap_or_else(|| DEFAULT_GRID.to_vec()),
        t_end: raw.t_end.unwrap_or(t_end),
        paths: raw.paths.unwrap_or(paths),
        seed: raw.seed.unwrap_or(0),
        out: raw.out.unwrap_or_else(|| PathBuf::from("out")),
        svg: raw.svg.unwrap_or(false),
        reference_factor: raw.reference_factor.unwrap_or(0.01),
        sweep_omegas: raw.sweep_omegas.unwrap_or_default(),
        sweep_h: raw.sweep_h.unwrap_or(0.05),
        resonances: raw
            .resonances
            .unwrap_or_else(|| vec![Resonance::FullPeriod, Resonance::QuarterPeriod]),
        baseline_factor: raw.baseline_factor.unwrap_or(0.1),
        h_range: raw.h_range.unwrap_or([0.5, 0.6]),
        samples: raw.samples.unwrap_or(100),
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    let positive = |name: &str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err(CliError::InvalidConfig(format!("{name} must be positive, got {v}")))
        }
    };
    positive("h", cfg.h)?;
    positive("t_end", cfg.t_end)?;
    positive("reference_factor", cfg.reference_factor)?;
    positive("sweep_h", cfg.sweep_h)?;
    positive("baseline_factor", cfg.baseline_factor)?;
    positive("h_range[0]", cfg.h_range[0])?;
    if cfg.h_range[1] < cfg.h_range[0] {
        return Err(CliError::InvalidConfig("h_range must be ascending".into()));
    }
    for &h in &cfg.h_grid {
        positive("h_grid", h)?;
    }
    if cfg.h_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CliError::InvalidConfig("h_grid must be strictly decreasing".into()));
    }
    if cfg.paths == 0 || cfg.samples == 0 {
        return Err(CliError::InvalidConfig("paths and samples must be at least 1".into()));
    }
    Ok(())
}

/// Reads `args.config` (if any) and resolves it against the flags.
pub fn parse_config(args: &CliArgs) -> Result<RunConfig, CliError> {
    let raw = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            parse_raw(&text, Format::from_path(path, &text))?
        }
        None => RawConfig::default(),
    };
    resolve(raw, args)
}

/// Result of a run. `flags` holds acceptance checks: `Some(pass)` or `None` when
/// not applicable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub command: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub flags: BTreeMap<String, Option<bool>>,
    #[serde(flatten)]
    pub results: Map<String, Value>,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.flags.values().all(|f| *f != Some(false))
    }
}

struct Output<'a> {
    dir: &'a Path,
    seed: u64,
    svg: bool,
}

fn fmt(v: f64) -> String {
    format!("{v:?}")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Output<'_> {
    /// CSV with a leading `seed` column.
    fn csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let csv_err = |e: csv::Error| CliError::Io {
            path: path.clone(),
            source: std::io::Error::other(e),
        };
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        let seed = self.seed.to_string();
        w.write_record(std::iter::once("seed").chain(header.iter().copied()))
            .map_err(csv_err)?;
        for row in rows {
            w.write_record(std::iter::once(seed.as_str()).chain(row.iter().map(String::as_str)))
                .map_err(csv_err)?;
        }
        w.flush().map_err(io_err(&path))
    }

    fn plot(&self, name: &str, plot: &Plot) -> Result<(), CliError> {
        if !self.svg {
            return Ok(());
        }
        let path = self.dir.join(name);
        fs::write(&path, plot.render()).map_err(io_err(&path))
    }
}

/// Runs the configured command, writing artifacts and `summary.json` to `cfg.out`.
pub fn run(cfg: &RunConfig) -> Result<Summary, CliError> {
    let start = Instant::now();
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let echo = cfg.out.join("resolved_config.json");
    let text = serde_json::to_string_pretty(cfg).expect("config serializes");
    fs::write(&echo, text + "\n").map_err(io_err(&echo))?;
    let out = Output {
        dir: &cfg.out,
        seed: cfg.seed,
        svg: cfg.svg,
    };
    let mut flags = BTreeMap::new();
    let mut results = Map::new();
    match cfg.command {
        Command::Simulate => simulate(cfg, &out, &mut flags, &mut results)?,
        Command::Converge => converge(cfg, &out, &mut flags, &mut results)?,
        Command::Moments => moments(cfg, &out, &mut flags, &mut results)?,
        Command::FpuDemo => fpu_demo(cfg, &out, &mut flags, &mut results)?,
        Command::StabilityScan => scan(cfg, &out, &mut results)?,
        Command::LemmaCheck => lemma_check(cfg, &out, &mut flags, &mut results)?,
    }
    let summary = Summary {
        command: cfg.command.name().to_string(),
        seed: cfg.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        flags,
        results,
    };
    let path = cfg.out.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(summary)
}

type Flags = BTreeMap<String, Option<bool>>;

fn noise_mode(sys: &CheckedSystem, method: Method) -> NoiseMode {
    if sys.is_deterministic() || method.is_deterministic_only() {
        NoiseMode::None
    } else {
        NoiseMode::ExactSample
    }
}

fn in_band(v: Option<f64>, lo: f64, hi: f64) -> Option<bool> {
    Some(v.is_some_and(|v| v >= lo && v <= hi))
}

fn simulate(cfg: &RunConfig, out: &Output, flags: &mut Flags, results: &mut Map<String, Value>) -> Result<(), CliError> {
    let sys = cfg.problem.build()?;
    let stepper = Stepper::new(&sys, StepPlan::new(cfg.method, cfg.h, noise_mode(&sys, cfg.method)))?;
    let x0 = cfg.problem.initial_state();
    let opts = IntegrateOptions::default();
    let runs = map_paths(cfg.paths, |i| {
        let mut stream = PathStream::new(cfg.seed, i as u64);
        let mut traj = Trajectory::default();
        let noise = if stepper.is_noisy() {
            Noise::Stream(&mut stream)
        } else {
            Noise::None
        };
        let res = integrate(&stepper, &x0, cfg.t_end, noise, &mut traj, &opts);
        (traj, res.err().map(|e| e.to_string()))
    });
    let d = sys.dim();
    let with_energy = sys.soft_potential.is_some();
    let mut header = vec!["path".to_string(), "step".to_string(), "t".to_string()];
    header.extend((0..d).map(|i| format!("q{i}")));
    header.extend((0..d).map(|i| format!("p{i}")));
    if with_energy {
        header.push("energy".into());
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, (traj, err)) in runs.iter().enumerate() {
        for (k, s) in traj.states.iter().enumerate() {
            let mut row = vec![i.to_string(), k.to_string(), fmt(s.t)];
            row.extend(s.q.iter().map(|&v| fmt(v)));
            row.extend(s.p.iter().map(|&v| fmt(v)));
            if with_energy {
                row.push(fmt(hamiltonian_energy(&sys, s)?));
            }
            rows.push(row);
        }
        if let Some(e) = err {
            failures.push(json!({ "path": i, "error": e }));
        }
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("trajectory.csv", &header, &rows)?;
    if let Some((traj, _)) = runs.first() {
        let mut plot = Plot::new("path 0", "t", "q");
        for i in 0..d {
            let pts = traj.states.iter().map(|s| (s.t, s.q[i])).collect();
            plot = plot.with(Series::line(&format!("q{i}"), pts));
        }
        out.plot("trajectory.svg", &plot)?;
    }
    flags.insert("completed".into(), Some(failures.is_empty()));
    results.insert("method".into(), json!(cfg.method.name()));
    results.insert("failures".into(), Value::Array(failures));
    Ok(())
}

fn fit_json(fit: &Option<LinearFit>) -> Value {
    fit.map_or(Value::Null, |f| json!(f.slope))
}

/// Expected order band of a method, if one is asserted.
fn order_band(method: Method, stochastic: bool) -> Option<(f64, f64)> {
    match method {
        Method::Sim1Langevin if stochastic => Some((0.4, 1.1)),
        Method::Sim1Hamiltonian | Method::Sim1Dual | Method::Sim1Langevin => Some((0.8, 1.3)),
        Method::Sim4Deterministic => Some((3.5, 4.5)),
        _ => None,
    }
}

fn converge(cfg: &RunConfig, out: &Output, flags: &mut Flags, results: &mut Map<String, Value>) -> Result<(), CliError> {
    let sys = cfg.problem.build()?;
    let x0 = cfg.problem.initial_state();
    let spec = StudySpec {
        method: cfg.method,
        step_grid: cfg.h_grid.clone(),
        t_end: cfg.t_end,
        n_paths: cfg.paths,
        seed: cfg.seed,
        reference: ReferenceSpec::Fine {
            target: cfg.reference_factor / cfg.problem.omega(),
        },
    };
    let mut report = strong_convergence_study(&sys, &x0, &spec)?;
    if !cfg.sweep_omegas.is_empty() {
        report.eps_sweep = epsilon_sweep(&cfg.sweep_omegas, cfg.sweep_h, &spec, |omega| {
            let p = cfg.problem.with_omega(omega);
            let sys = p.build().map_err(|e| DiagnosticsError::InvalidInput(e.to_string()))?;
            Ok((sys, p.initial_state(), ReferenceSpec::Fine {
                target: cfg.reference_factor / omega,
            }))
        })?;
    }

    let mut rows = Vec::new();
    for e in &report.errors {
        let blow = e.blowup.clone().unwrap_or_default();
        for (kind, rms, se) in [("q", e.rms_q, e.se_q), ("p", e.rms_p, e.se_p), ("e", e.rms_e, e.se_e)] {
            rows.push(vec![fmt(e.h), kind.into(), fmt(rms), fmt(se), blow.clone()]);
        }
    }
    out.csv("convergence.csv", &["h", "kind", "rms", "se", "blowup"], &rows)?;
    if !report.eps_sweep.is_empty() {
        let mut rows = Vec::new();
        for s in &report.eps_sweep {
            let e = &s.stats;
            for (kind, rms, se) in [("q", e.rms_q, e.se_q), ("p", e.rms_p, e.se_p), ("e", e.rms_e, e.se_e)] {
                rows.push(vec![fmt(s.omega), fmt(e.h), kind.into(), fmt(rms), fmt(se)]);
            }
        }
        out.csv("sweep.csv", &["omega", "h", "kind", "rms", "se"], &rows)?;
    }
    let mut plot = Plot::new(&format!("{} strong error", cfg.method), "H", "RMS error").log_log();
    for (kind, pick) in [("q", 0usize), ("p", 1), ("e", 2)] {
        let pts = report
            .errors
            .iter()
            .map(|e| (e.h, [e.rms_q, e.rms_p, e.rms_e][pick]))
            .collect();
        plot = plot.with(Series::markers(kind, pts));
    }
    if let Some(fit) = report.order_q {
        let pts = cfg
            .h_grid
            .iter()
            .map(|&h| (h, (fit.intercept + fit.slope * h.ln()).exp()))
            .collect();
        plot = plot.with(Series::line(&format!("q fit, slope {:.3}", fit.slope), pts));
    }
    out.plot("convergence.svg", &plot)?;

    let stochastic = !sys.is_deterministic();
    let band = order_band(cfg.method, stochastic);
    let slope_q = report.order_q.map(|f| f.slope);
    let slope_e = report.order_e.map(|f| f.slope);
    flags.insert("order_q_in_band".into(), band.and_then(|(lo, hi)| in_band(slope_q, lo, hi)));
    flags.insert(
        "order_e_in_band".into(),
        band.filter(|_| stochastic).and_then(|(lo, hi)| in_band(slope_e, lo, hi)),
    );
    let ratio = report.sweep_ratio_q();
    flags.insert(
        "uniform_q_across_omega".into(),
        (!report.eps_sweep.is_empty()).then(|| ratio.is_some_and(|r| r <= 2.0)),
    );
    results.insert("method".into(), json!(report.method));
    results.insert("fitted_order_q".into(), fit_json(&report.order_q));
    results.insert("fitted_order_p".into(), fit_json(&report.order_p));
    results.insert("fitted_order_e".into(), fit_json(&report.order_e));
    results.insert("order_band".into(), json!(band));
    results.insert("reference".into(), json!(report.reference));
    results.insert("reference_step".into(), json!(report.reference_step));
    results.insert("n_paths".into(), json!(report.n_paths));
    results.insert("sweep_ratio_q".into(), json!(ratio));
    results.insert("sweep_ratio_e".into(), json!(report.sweep_ratio_e()));
    Ok(())
}

fn resonance_name(r: Resonance) -> &'static str {
    match r {
        Resonance::FullPeriod => "full-period",
        Resonance::QuarterPeriod => "quarter-period",
    }
}

fn moments(cfg: &RunConfig, out: &Output, flags: &mut Flags, results: &mut Map<String, Value>) -> Result<(), CliError> {
    let sys = cfg.problem.build()?;
    if sys.is_deterministic() {
        return Err(CliError::InvalidConfig("moments needs a stochastic problem".into()));
    }
    let omega = cfg.problem.omega();
    let x0 = cfg.problem.initial_state();
    let observables = [Observable::position("x", 0), Observable::position("y", 1)];
    let mut rows = Vec::new();
    let mut per_case = Vec::new();
    for &res in &cfg.resonances {
        let big_h = snap_resonant(cfg.h, omega, res);
        let fine_h = big_h / (big_h * omega / cfg.baseline_factor).ceil();
        let a = MomentRun {
            system: sys.clone(),
            plan: StepPlan::new(cfg.method, big_h, noise_mode(&sys, cfg.method)),
            initial: x0.clone(),
            seed: cfg.seed,
        };
        let b = MomentRun {
            system: sys.clone(),
            plan: StepPlan::new(Method::Gla1, fine_h, NoiseMode::ExactSample),
            initial: x0.clone(),
            seed: cfg.seed.wrapping_add(1),
        };
        let cmp = moment_comparison(&a, &b, &observables, big_h, cfg.t_end, cfg.paths)?;
        let name = resonance_name(res);
        let mut max_y: f64 = 0.0;
        for r in &cmp.rows {
            if r.observable == "y" {
                max_y = max_y.max(r.z_mean.abs()).max(r.z_var.abs());
            }
            rows.push(vec![
                name.into(),
                fmt(big_h),
                fmt(r.t),
                r.observable.clone(),
                fmt(r.a.mean),
                fmt(r.a.var),
                fmt(r.a.se_mean),
                fmt(r.a.se_var),
                fmt(r.b.mean),
                fmt(r.b.var),
                fmt(r.b.se_mean),
                fmt(r.b.se_var),
                fmt(r.z_mean),
                fmt(r.z_var),
            ]);
        }
        flags.insert(format!("max_abs_z_y_{name}_le_3"), Some(max_y <= 3.0));
        per_case.push(json!({
            "resonance": name,
            "h": big_h,
            "baseline_h": fine_h,
            "max_abs_z_y": max_y,
            "max_abs_z_mean": cmp.max_abs_z_mean,
            "max_abs_z_var": cmp.max_abs_z_var,
            "failed_paths": cmp.failed_paths_a,
            "failed_paths_baseline": cmp.failed_paths_b,
        }));
        for (stat, pick) in [("mean", 0usize), ("variance", 1)] {
            let series = |side: usize| -> Vec<(f64, f64)> {
                cmp.rows
                    .iter()
                    .filter(|r| r.observable == "y")
                    .map(|r| {
                        let e = if side == 0 { r.a } else { r.b };
                        (r.t, if pick == 0 { e.mean } else { e.var })
                    })
                    .collect()
            };
            let plot = Plot::new(&format!("y {stat}, {name}"), "t", stat)
                .with(Series::line(cfg.method.name(), series(0)))
                .with(Series::line("gla1", series(1)));
            out.plot(&format!("moments_y_{stat}_{name}.svg"), &plot)?;
        }
    }
    out.csv(
        "moments.csv",
        &[
            "resonance", "h", "t", "observable", "mean", "var", "se_mean", "se_var", "baseline_mean",
            "baseline_var", "baseline_se_mean", "baseline_se_var", "z_mean", "z_var",
        ],
        &rows,
    )?;
    results.insert("method".into(), json!(cfg.method.name()));
    results.insert("baseline".into(), json!(Method::Gla1.name()));
    results.insert("baseline_seed".into(), json!(cfg.seed.wrapping_add(1)));
    results.insert("cases".into(), Value::Array(per_case));
    Ok(())
}

fn fpu_demo(cfg: &RunConfig, out: &Output, flags: &mut Flags, results: &mut Map<String, Value>) -> Result<(), CliError> {
    let fpu = match &cfg.problem {
        ProblemConfig::Fpu(f) => f.clone(),
        other => {
            return Err(CliError::InvalidConfig(format!(
                "fpu-demo needs the fpu problem, got '{}'",
                other.name()
            )))
        }
    };
    let sys = cfg.problem.build()?;
    let stepper = Stepper::new(&sys, StepPlan::deterministic(cfg.method, cfg.h))?;
    let x0 = cfg.problem.initial_state();
    let e0 = hamiltonian_energy(&sys, &x0)?;
    let m = fpu.m;
    let mut expansions = Vec::new();
    let mut midpoints = Vec::new();
    let mut springs = Vec::new();
    let mut totals = Vec::new();
    let mut energy = Vec::new();
    let mut times = Vec::new();
    let mut rel = Vec::new();
    let mut total_i = Vec::new();
    let mut energy_err = None;
    let mut rec = |_k: usize, t: f64, q: &nalgebra::DVector<f64>, p: &nalgebra::DVector<f64>| {
        let s = State { q: q.clone(), p: p.clone(), t };
        let o = fpu_observables(&s, &fpu);
        let e = match hamiltonian_energy(&sys, &s) {
            Ok(e) => e,
            Err(err) => {
                energy_err.get_or_insert(err);
                f64::NAN
            }
        };
        let tt = fmt(t);
        let with_t = |v: &[f64]| std::iter::once(tt.clone()).chain(v.iter().map(|&x| fmt(x))).collect::<Vec<_>>();
        expansions.push(with_t(&o.expansions));
        midpoints.push(with_t(&o.midpoints));
        springs.push(with_t(&o.spring_energies));
        totals.push(with_t(&[o.total_stiff_energy]));
        let r = (e - e0) / e0.abs();
        energy.push(with_t(&[e, r]));
        times.push(t);
        rel.push(r);
        total_i.push(o.total_stiff_energy);
    };
    let outcome = integrate(&stepper, &x0, cfg.t_end, Noise::None, &mut rec, &IntegrateOptions::default());
    if let Some(e) = energy_err {
        return Err(e.into());
    }
    let names = |prefix: &str, offset: usize| -> Vec<String> {
        std::iter::once("t".to_string())
            .chain((1..=m).map(|j| format!("{prefix}{}", j + offset)))
            .collect()
    };
    let write = |name: &str, header: Vec<String>, rows: &[Vec<String>]| {
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        out.csv(name, &h, rows)
    };
    write("stiff_expansions.csv", names("x", m), &expansions)?;
    write("midpoints.csv", names("x", 0), &midpoints)?;
    write("spring_energies.csv", names("I", 0), &springs)?;
    write("total_stiff_energy.csv", vec!["t".into(), "I".into()], &totals)?;
    write(
        "energy.csv",
        vec!["t".into(), "hamiltonian".into(), "relative_error".into()],
        &energy,
    )?;

    let completed = outcome.is_ok();
    let max_rel = rel.iter().fold(0.0_f64, |a, r| a.max(r.abs()));
    let drift = (times.len() >= 3).then(|| linear_fit(&times, &rel));
    let i0 = total_i.first().copied().unwrap_or(f64::NAN);
    let max_i_dev = total_i.iter().fold(0.0_f64, |a, v| a.max((v - i0).abs() / i0));
    flags.insert("completed".into(), Some(completed));
    flags.insert("energy_within_1pct".into(), Some(completed && max_rel <= 0.01));
    flags.insert(
        "no_energy_drift".into(),
        Some(drift.is_some_and(|f| f.slope.abs() <= 2.0 * f.slope_se)),
    );
    flags.insert("stiff_energy_within_10pct".into(), Some(completed && max_i_dev <= 0.1));
    results.insert("method".into(), json!(cfg.method.name()));
    results.insert("initial_energy".into(), json!(e0));
    results.insert("max_relative_energy_error".into(), json!(max_rel));
    results.insert("energy_drift_slope".into(), json!(drift.map(|f| f.slope)));
    results.insert("energy_drift_slope_se".into(), json!(drift.map(|f| f.slope_se)));
    results.insert("initial_stiff_energy".into(), json!(i0));
    results.insert("max_relative_stiff_energy_deviation".into(), json!(max_i_dev));
    if let Err(e) = &outcome {
        results.insert("error".into(), json!(e.to_string()));
    }

    let col = |rows: &[Vec<String>], j: usize| -> Vec<(f64, f64)> {
        rows.iter()
            .map(|r| (r[0].parse().unwrap_or(f64::NAN), r[j].parse().unwrap_or(f64::NAN)))
            .collect()
    };
    let multi = |title: &str, rows: &[Vec<String>], header: Vec<String>| {
        let mut p = Plot::new(title, "t", "");
        for (j, h) in header.iter().enumerate().skip(1) {
            p = p.with(Series::line(h, col(rows, j)));
        }
        p
    };
    out.plot("stiff_expansions.svg", &multi("stiff spring expansions", &expansions, names("x", m)))?;
    out.plot("midpoints.svg", &multi("spring midpoints", &midpoints, names("x", 0)))?;
    out.plot("spring_energies.svg", &multi("stiff spring energies", &springs, names("I", 0)))?;
    out.plot(
        "total_stiff_energy.svg",
        &Plot::new("total stiff energy", "t", "I").with(Series::line("I", col(&totals, 1))),
    )?;
    Ok(())
}

fn scan(cfg: &RunConfig, out: &Output, results: &mut Map<String, Value>) -> Result<(), CliError> {
    let sys = cfg.problem.build()?;
    let steps = linspace(cfg.h_range[0], cfg.h_range[1], cfg.samples);
    let rep = stability_scan(&sys, cfg.method, &cfg.problem.initial_state(), &steps, cfg.t_end, cfg.paths, cfg.seed)?;
    let rows: Vec<Vec<String>> = rep
        .samples
        .iter()
        .map(|s| vec![fmt(s.h), s.stable.to_string(), s.detail.clone().unwrap_or_default()])
        .collect();
    out.csv("stability.csv", &["h", "stable", "detail"], &rows)?;
    let pts = rep
        .samples
        .iter()
        .map(|s| (s.h, if s.stable { 1.0 } else { 0.0 }))
        .collect();
    out.plot(
        "stability.svg",
        &Plot::new("stability (1 = stable)", "H", "stable").with(Series::markers("stable", pts)),
    )?;
    results.insert("method".into(), json!(cfg.method.name()));
    results.insert("unstable_intervals".into(), json!(rep.unstable_intervals));
    Ok(())
}

fn lemma_check(cfg: &RunConfig, out: &Output, flags: &mut Flags, results: &mut Map<String, Value>) -> Result<(), CliError> {
    let sys = cfg.problem.build()?;
    let rep = bridge_local_error_study(
        &sys,
        &cfg.problem.initial_state(),
        &cfg.h_grid,
        cfg.paths,
        cfg.seed,
        cfg.reference_factor / cfg.problem.omega(),
    )?;
    let rows: Vec<Vec<String>> = rep
        .step_grid
        .iter()
        .zip(rep.original_vs_bridge.iter().zip(&rep.bridge_vs_sim))
        .map(|(&h, (&a, &b))| vec![fmt(h), fmt(a), fmt(b)])
        .collect();
    out.csv("lemma.csv", &["h", "original_vs_bridge", "bridge_vs_sim"], &rows)?;
    let pts = |v: &[f64]| rep.step_grid.iter().copied().zip(v.iter().copied()).collect();
    out.plot(
        "lemma.svg",
        &Plot::new("one-step distances", "H", "RMS energy-norm distance")
            .log_log()
            .with(Series::markers("original vs bridge", pts(&rep.original_vs_bridge)))
            .with(Series::markers("bridge vs sim1", pts(&rep.bridge_vs_sim))),
    )?;
    let s1 = rep.slope_original_vs_bridge.slope;
    let s2 = rep.slope_bridge_vs_sim.slope;
    flags.insert("original_vs_bridge_slope_in_band".into(), in_band(Some(s1), 1.3, 1.8));
    flags.insert("bridge_vs_sim_slope_in_band".into(), in_band(Some(s2), 1.8, 2.4));
    results.insert("slope_original_vs_bridge".into(), json!(s1));
    results.insert("slope_bridge_vs_sim".into(), json!(s2));
    results.insert("fine_step".into(), json!(rep.fine_step));
    results.insert("n_paths".into(), json!(rep.n_paths));
    Ok(())
}
