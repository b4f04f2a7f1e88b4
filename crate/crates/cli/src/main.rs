//! `rgbe-advbench`: synthesize data, train the surrogate tracker, run
//! attacks, and evaluate tracking quality.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::{load_config_file, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0} sequence(s) failed")]
    SequencesFailed(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Event(#[from] advbench::eventcam::EventError),
    #[error(transparent)]
    Tracker(#[from] advbench::tracker::TrackerError),
    #[error(transparent)]
    Eval(#[from] advbench::eval::EvalError),
}

#[derive(Debug, Parser)]
#[command(name = "rgbe-advbench", version, about, allow_negative_numbers = true)]
struct Cli {
    /// JSON file with default values for any option.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic sequences.
    Synth(RunConfig),
    /// Train the surrogate tracker on a dataset.
    Train(RunConfig),
    /// Attack every frame of every sequence and write the attacked inputs.
    Attack(RunConfig),
    /// Track sequences and report PR, NPR, and SR.
    Eval(RunConfig),
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("RGBE_ADVBENCH_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("RGBE_ADVBENCH_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let file = match &cli.config {
        Some(p) => load_config_file(p)?,
        None => RunConfig::default(),
    };
    let resolve = |c: RunConfig| c.merged_with(file.clone()).resolved();
    match cli.command {
        Command::Synth(c) => commands::synth(&resolve(c)?),
        Command::Train(c) => commands::train_cmd(&resolve(c)?),
        Command::Attack(c) => commands::attack(&resolve(c)?),
        Command::Eval(c) => commands::eval(&resolve(c)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
