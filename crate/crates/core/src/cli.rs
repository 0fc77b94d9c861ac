//! Command-line shell: config loading, orchestration of solve / evaluate /
//! compare / coverage runs, and deterministic artifact output.
//!
//! Everything written under the output directory depends only on the
//! resolved config, so repeated runs produce identical files. Timings go to
//! stderr and are never persisted.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::estimation::{coverage_experiment, EstimationError, UncertaintyMode};
use crate::evaluate::{compare_modes, ComparisonRow};
use crate::model::{CovarianceVector, Mat2, ModelConfig, ModelError, Vec2};
use crate::numerics::RngStream;
use crate::solver::{solve_backward, SolverConfig, SolverError};
use crate::surrogate::DEFAULT_NUGGET;

pub const MANIFEST_VERSION: u32 = 1;

/// Stream index for the coverage experiment under the run seed. Disjoint
/// from the solver streams.
const STREAM_COVERAGE: u64 = 16;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid config field `{field}`: {constraint}")]
    Validation { field: String, constraint: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Io { .. } => 1,
        }
    }

    fn invalid(field: &str, constraint: &str) -> Self {
        CliError::Validation { field: field.to_string(), constraint: constraint.to_string() }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let ModelError::Invalid { field, constraint } = e;
        CliError::Validation { field: field.to_string(), constraint }
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::Config { field, constraint } => CliError::Validation { field: field.to_string(), constraint },
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Flat experiment config. Missing keys take the defaults below; unknown
/// keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub horizon: usize,
    pub beta: f64,
    pub gamma: f64,
    pub state_matrix: Mat2,
    pub control_matrix: Mat2,
    pub state_weight: Mat2,
    pub control_weight: Mat2,
    pub reward_cap: f64,
    pub reward_floor: f64,
    pub x0: Vec2,
    pub c0: CovarianceVector,
    pub sigma_bar: f64,
    pub alpha: f64,
    pub action_grid_n: usize,

    pub paths: usize,
    pub mesh_size: usize,
    pub mc_samples: usize,
    pub nugget: f64,

    /// Evaluation paths `K`.
    pub eval_paths: usize,
    /// True covariance used for evaluation and coverage.
    pub theta_star: CovarianceVector,
    pub modes: Vec<UncertaintyMode>,
    /// Base seed. Required; there is no clock-derived default.
    pub seed: Option<u64>,
    /// Number of consecutive seeds, starting at `seed`, used by `compare`.
    pub compare_seeds: usize,
    pub out_dir: PathBuf,
    pub coverage_steps: usize,
    pub coverage_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let s = SolverConfig::default();
        Self {
            horizon: m.horizon,
            beta: m.beta,
            gamma: m.gamma,
            state_matrix: m.state_matrix,
            control_matrix: m.control_matrix,
            state_weight: m.state_weight,
            control_weight: m.control_weight,
            reward_cap: m.reward_cap,
            reward_floor: m.reward_floor,
            x0: m.x0,
            c0: m.c0,
            sigma_bar: m.sigma_bar,
            alpha: m.alpha,
            action_grid_n: m.action_grid_n,
            paths: s.paths,
            mesh_size: s.mesh_size,
            mc_samples: s.mc_samples,
            nugget: DEFAULT_NUGGET,
            eval_paths: 2000,
            theta_star: CovarianceVector::new(0.009, 0.016, 0.006),
            modes: UncertaintyMode::ALL.to_vec(),
            seed: None,
            compare_seeds: 1,
            out_dir: PathBuf::from("out"),
            coverage_steps: 200,
            coverage_trials: 2000,
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            horizon: self.horizon,
            beta: self.beta,
            gamma: self.gamma,
            state_matrix: self.state_matrix,
            control_matrix: self.control_matrix,
            state_weight: self.state_weight,
            control_weight: self.control_weight,
            reward_cap: self.reward_cap,
            reward_floor: self.reward_floor,
            x0: self.x0,
            c0: self.c0,
            sigma_bar: self.sigma_bar,
            alpha: self.alpha,
            action_grid_n: self.action_grid_n,
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig { paths: self.paths, mesh_size: self.mesh_size, mc_samples: self.mc_samples, nugget: self.nugget }
    }

    /// Checks every invariant except the presence of a seed, which may
    /// still come from a command-line flag.
    pub fn validate(&self) -> Result<(), CliError> {
        let model = self.model();
        model.validate()?;
        self.solver().validate()?;
        if self.eval_paths < 1 {
            return Err(CliError::invalid("eval_paths", "must be >= 1"));
        }
        if !model.theta().contains(&self.theta_star) || !self.theta_star.as_matrix().is_covariance() {
            return Err(CliError::invalid("theta_star", "must be a covariance in the parameter set"));
        }
        if self.modes.is_empty() {
            return Err(CliError::invalid("modes", "must not be empty"));
        }
        if self.compare_seeds < 1 {
            return Err(CliError::invalid("compare_seeds", "must be >= 1"));
        }
        if self.coverage_steps < 1 {
            return Err(CliError::invalid("coverage_steps", "must be >= 1"));
        }
        if self.coverage_trials < 1 {
            return Err(CliError::invalid("coverage_trials", "must be >= 1"));
        }
        Ok(())
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed.ok_or_else(|| CliError::invalid("seed", "required (set it in the config or pass --seed)"))
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub manifest_version: u32,
    pub subcommand: Command,
    pub crate_version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub config: RunConfig,
}

fn parse_error(e: serde_json::Error) -> CliError {
    CliError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
}

/// Parses and validates a config. A manifest written by an earlier run is
/// accepted too, in which case its embedded config is used.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(parse_error)?;
    let config = if value.get("manifest_version").is_some() {
        serde_json::from_str::<Manifest>(text).map_err(parse_error)?.config
    } else {
        serde_json::from_str::<RunConfig>(text).map_err(parse_error)?
    };
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Subcommand)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    /// Backward solve for each configured mode; writes tables and GP dumps.
    Solve,
    /// Solve, then score each policy on fresh paths under the true covariance.
    Evaluate,
    /// Evaluate over `compare_seeds` consecutive seeds with shared noise.
    Compare,
    /// Monte Carlo coverage of the confidence region.
    Coverage,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Evaluate => "evaluate",
            Command::Compare => "compare",
            Command::Coverage => "coverage",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Ar,
    Ad,
    Sr,
    All,
}

impl ModeArg {
    fn modes(self) -> Vec<UncertaintyMode> {
        match self {
            ModeArg::Ar => vec![UncertaintyMode::AdaptiveRobust],
            ModeArg::Ad => vec![UncertaintyMode::Adaptive],
            ModeArg::Sr => vec![UncertaintyMode::StrongRobust],
            ModeArg::All => UncertaintyMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "adaptive-robust", version, about = "Adaptive robust risk-sensitive control experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON config or a manifest from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, global = true)]
    pub mode: Option<ModeArg>,
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// No summary on stdout and no timings on stderr.
    #[arg(long, global = true)]
    pub quiet: bool,
}

impl Cli {
    /// Loads the config file (or defaults) and applies flag overrides.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => load_config(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = self.mode {
            config.modes = m.modes();
        }
        if let Some(g) = self.gamma {
            config.gamma = g;
        }
        if let Some(s) = self.seed {
            config.seed = Some(s);
        }
        if let Some(o) = &self.out {
            config.out_dir = o.clone();
        }
        config.validate()?;
        config.require_seed()?;
        Ok(config)
    }
}

/// Human-readable summary of a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Solved(Vec<(UncertaintyMode, f64)>),
    Compared(Vec<ComparisonRow>),
    Coverage { hits: usize, trials: usize, frequency: f64 },
}

/// Executes one subcommand and writes all artifacts under `config.out_dir`.
pub fn run(config: &RunConfig, command: Command, quiet: bool) -> Result<Outcome, CliError> {
    config.validate()?;
    let seed = config.require_seed()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(|e| CliError::Validation {
        field: "out_dir".into(),
        constraint: format!("must be writable ({e})"),
    })?;
    write_manifest(config, command, seed)?;
    let started = Instant::now();
    let outcome = match command {
        Command::Solve => solve(config, seed, quiet)?,
        Command::Evaluate => compare(config, &[seed])?,
        Command::Compare => {
            let seeds: Vec<u64> = (0..config.compare_seeds as u64).map(|k| seed.wrapping_add(k)).collect();
            compare(config, &seeds)?
        }
        Command::Coverage => coverage(config, seed)?,
    };
    if !quiet {
        eprintln!("{} finished in {:.1} s", command.name(), started.elapsed().as_secs_f64());
    }
    Ok(outcome)
}

fn write_manifest(config: &RunConfig, command: Command, seed: u64) -> Result<(), CliError> {
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        subcommand: command,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: config.hash(),
        seed,
        config: config.clone(),
    };
    let path = config.out_dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(path).map_err(io_err(path))?))
}

fn solve(config: &RunConfig, seed: u64, quiet: bool) -> Result<Outcome, CliError> {
    let model = config.model();
    let solver = config.solver();
    let path = config.out_dir.join("results.csv");
    let mut w = create(&path)?;
    let mut write = |line: String| writeln!(w, "{line}").map_err(io_err(&path));
    write("mode,gamma,seed,initial_value,action1,action2".into())?;
    let mut values = Vec::new();
    for &mode in &config.modes {
        let started = Instant::now();
        let result = solve_backward(&model, &solver, mode, seed)?;
        if !quiet {
            eprintln!("solve {mode}: {:.1} s", started.elapsed().as_secs_f64());
        }
        result.write_artifacts(&config.out_dir, mode.label()).map_err(io_err(&config.out_dir))?;
        let a = result.initial_action();
        write(format!("{mode},{},{seed},{},{},{}", model.gamma, result.initial_value(), a.0[0], a.0[1]))?;
        values.push((mode, result.initial_value()));
    }
    w.flush().map_err(io_err(&path))?;
    Ok(Outcome::Solved(values))
}

/// Results schema shared by `evaluate` and `compare`.
pub const RESULTS_HEADER: &str = "mode,gamma,K,seed,initial_value,criterion,std_error";

fn compare(config: &RunConfig, seeds: &[u64]) -> Result<Outcome, CliError> {
    let rows = compare_modes(&config.model(), &config.solver(), &config.modes, &config.theta_star, seeds, config.eval_paths)?;
    let path = config.out_dir.join("results.csv");
    let mut w = create(&path)?;
    let mut lines = vec![RESULTS_HEADER.to_string()];
    for r in &rows {
        lines.push(format!(
            "{},{},{},{},{},{},{}",
            r.mode, r.report.gamma, r.report.paths, r.seed, r.initial_value, r.report.criterion, r.report.std_error
        ));
    }
    for line in lines {
        writeln!(w, "{line}").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(Outcome::Compared(rows))
}

fn coverage(config: &RunConfig, seed: u64) -> Result<Outcome, CliError> {
    let model = config.model();
    let rng = RngStream::new(seed).derive(STREAM_COVERAGE);
    let report = coverage_experiment(
        &config.theta_star,
        &model.c0,
        model.alpha,
        config.coverage_steps,
        config.coverage_trials,
        &model.theta(),
        &rng,
    )?;
    let path = config.out_dir.join("coverage.csv");
    let mut w = create(&path)?;
    writeln!(w, "alpha,steps,trials,hits,frequency").map_err(io_err(&path))?;
    writeln!(w, "{},{},{},{},{}", report.alpha, report.steps, report.trials, report.hits, report.frequency)
        .map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    Ok(Outcome::Coverage { hits: report.hits, trials: report.trials, frequency: report.frequency })
}

fn print_outcome(outcome: &Outcome) {
    match outcome {
        Outcome::Solved(values) => {
            for (mode, v) in values {
                println!("{mode}: W0 = {v}");
            }
        }
        Outcome::Compared(rows) => {
            for r in rows {
                println!(
                    "seed {} {}: W0 = {:.6}, criterion = {:.6} (se {:.6})",
                    r.seed, r.mode, r.initial_value, r.report.criterion, r.report.std_error
                );
            }
        }
        Outcome::Coverage { hits, trials, frequency } => println!("coverage: {hits}/{trials} = {frequency}"),
    }
}

/// Entry point for the binary. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = cli.resolve().and_then(|config| run(&config, cli.command, cli.quiet));
    match result {
        Ok(outcome) => {
            if !cli.quiet {
                print_outcome(&outcome);
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
