//! The `worldkit` command line: argument parsing, run configuration and one
//! runner per verb. Everything is exposed as a library so tests can drive
//! the pipeline in-process.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

pub use config::{parse_config, RunConfig};

/// Environment variable capping the worker-thread count.
pub const THREADS_ENV: &str = "WORLDKIT_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running a verb; exit code 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<worldkit_core::Error> for CliError {
    fn from(e: worldkit_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "worldkit", version, about = "Gaussian world models on synthetic driving scenes")]
pub struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set fit.iters=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run with a fixed thread count (WORLDKIT_THREADS, or 1 when unset).
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Write artifacts to this directory instead of `<output_dir>/<hash>`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the scene and its ground-truth occupancy for every frame.
    Synth,
    /// Fit Gaussians to the scene's camera views.
    Fit,
    /// Finite-difference check of the render gradients.
    Gradcheck,
    /// Train the Gaussian flow head.
    FlowPretrain,
    /// Train the ego planner on constant-velocity scenes.
    PlanTrain,
    /// Roll occupancy forward from the perceived Gaussians.
    Forecast,
    /// Score forecasts and plans, or one explicit pair of grids.
    Eval {
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
    },
    /// Render depth and semantic images from every camera.
    Render,
}

fn thread_count(deterministic: bool) -> Result<Option<usize>, CliError> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| CliError::Validation(format!("{THREADS_ENV}={v:?} is not a positive integer")))?,
        ),
        Err(_) => None,
    };
    Ok(match (cap, deterministic) {
        (Some(n), _) => Some(n),
        (None, true) => Some(1),
        (None, false) => None,
    })
}

/// Runs one verb in `dir`, creating it first.
pub fn run_command(cfg: &RunConfig, command: &Command, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    match command {
        Command::Synth => commands::synth(cfg, dir),
        Command::Fit => commands::fit(cfg, dir),
        Command::Gradcheck => {
            if commands::gradcheck(cfg, dir)? {
                Ok(())
            } else {
                Err(CliError::Validation(format!("gradient check failed; see {}", dir.join("gradcheck.json").display())))
            }
        }
        Command::FlowPretrain => commands::flow_pretrain(cfg, dir),
        Command::PlanTrain => commands::plan_train(cfg, dir),
        Command::Forecast => commands::forecast(cfg, dir),
        Command::Eval { pred, gt } => commands::eval(cfg, dir, pred.as_deref(), gt.as_deref()),
        Command::Render => commands::render(cfg, dir).map(|_| ()),
    }
}

/// Parses the configuration, sizes the thread pool and runs the verb.
/// Returns the run directory.
pub fn run(cli: &Cli) -> Result<PathBuf, CliError> {
    let cfg = parse_config(cli.config.as_deref(), &cli.overrides)?;
    let dir = cli.out.clone().unwrap_or_else(|| cfg.run_dir());
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cli.deterministic)? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| run_command(&cfg, &cli.command, &dir))?;
    std::fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)? + "\n")?;
    Ok(dir)
}
