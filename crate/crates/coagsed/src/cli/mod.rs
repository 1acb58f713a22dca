//! Experiment runner: configuration, subcommands and reproducible outputs.

pub mod commands;
pub mod config;
pub mod io;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::Outcome;
pub use config::ExperimentConfig;

use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "coagsed", about = "Coagulation with fast sedimentation transport")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat key = value config file; defaults apply to absent keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides run.seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// 2D run: snapshots, mass series, envelope and concentration reports.
    #[command(name = "run-2d")]
    Run2d,
    /// Diagonal-limit run from the y-marginal of the initial field.
    RunDiagonal,
    /// Picard iteration on the mild formulation; residual history.
    Picard,
    /// Characteristic-system sweep over random starts.
    Characteristics,
    /// 2D runs for each epsilon compared with one diagonal-limit run.
    SweepEpsilon,
    /// Lemma checks, semigroup decay, characteristic bounds and envelope.
    CheckBounds,
    /// Convert a snapshot to the rain-model frame, or back with --inverse.
    Rescale {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        inverse: bool,
    },
}

pub fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::parse("")?,
    };
    match cli.seed {
        Some(s) => cfg.with("run.seed", s),
        None => Ok(cfg),
    }
}

pub fn execute(cli: &Cli, cfg: &ExperimentConfig) -> Result<Outcome> {
    let out = &cli.out;
    match &cli.command {
        Command::Run2d => commands::cmd_run2d(cfg, out),
        Command::RunDiagonal => commands::cmd_run_diagonal(cfg, out),
        Command::Picard => commands::cmd_picard(cfg, out),
        Command::Characteristics => commands::cmd_characteristics(cfg, out),
        Command::SweepEpsilon => commands::cmd_sweep_epsilon(cfg, out),
        Command::CheckBounds => commands::cmd_check_bounds(cfg, out),
        Command::Rescale { snapshot, inverse } => commands::cmd_rescale(cfg, snapshot, *inverse, out),
    }
}

/// 0 on success, 1 on failed exact checks or solver errors, 2 on configuration errors.
pub fn exit_code(result: &Result<Outcome>) -> i32 {
    match result {
        Ok(o) if o.passed() => 0,
        Ok(_) => 1,
        Err(Error::Config(_)) => 2,
        Err(_) => 1,
    }
}

/// Parses, runs and reports; returns the process exit status.
pub fn main_with(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialised: {e}");
        }
    }
    let result = load_config(&cli).and_then(|cfg| execute(&cli, &cfg));
    match &result {
        Ok(o) => {
            for s in &o.summary {
                println!("{s}");
            }
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            for f in &o.failures {
                eprintln!("error: {f}");
            }
        }
        Err(e) => eprintln!("error: {e}"),
    }
    exit_code(&result)
}
