//! `cocl` — contrastive continual learning experiment runner.
//!
//! Verbs: `run` (one full training + probe pipeline), `ablate`
//! (buffer/distillation grid or distillation-power sweep),
//! `compare-preservation` (the four preservation losses under shared seeds),
//! `eval-matrix` (re-probe saved checkpoints under a chosen pool).
//!
//! Exit codes: 0 success, 2 config/input error, 3 numeric divergence.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cocl_core::error::CoclError;
use cocl_core::eval::ProbePool;

#[derive(Parser)]
#[command(name = "cocl", about = "Contrastive continual learning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config file (flat key = value lines with dotted sections).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the task sequence, probe each snapshot, write artifacts.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run a grid of ablation cells and emit one table.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// `buffer-ird` for the four-arm grid, `lambda:0,0.1,1` for a sweep.
        #[arg(long)]
        grid: String,
        /// Seeds per cell (shared across cells).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Compare the four preservation losses under shared seeds.
    #[command(name = "compare-preservation")]
    ComparePreservation {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Recompute an accuracy matrix from a run's checkpoints.
    #[command(name = "eval-matrix")]
    EvalMatrix {
        #[command(flatten)]
        common: Common,
        /// Run directory holding `checkpoints/task_XXX.bin`.
        #[arg(long)]
        run: PathBuf,
        /// Probe pool: last-task-plus-buffer | seen | all.
        #[arg(long, default_value = "all")]
        pool: String,
    },
}

fn load(common: &Common) -> Result<config::ExperimentConfig, CoclError> {
    let mut cfg = config::parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg = cfg.with_out_dir(out.clone());
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<(), CoclError> {
    match cli.command {
        Command::Run { common } => commands::run(load(&common)?),
        Command::Ablate {
            common,
            grid,
            seeds,
        } => {
            let grid = commands::GridSpec::parse(&grid)?;
            commands::ablate(load(&common)?, grid, seeds)
        }
        Command::ComparePreservation { common, seeds } => {
            commands::compare_preservation(load(&common)?, seeds)
        }
        Command::EvalMatrix { common, run, pool } => {
            let pool = ProbePool::parse(&pool)?;
            commands::eval_matrix(load(&common)?, run, pool)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                CoclError::Numeric { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
