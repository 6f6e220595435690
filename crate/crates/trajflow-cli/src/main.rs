//! Command-line front end for the trajflow library.
//!
//! Five subcommands: `train` fits a model from a JSON run config and writes
//! metrics plus checkpoints, `eval` integrates flows from a checkpoint,
//! `export-field` samples the learned velocity on a grid, `ablate` trains the
//! removal matrix of loss terms, and `solver-bench` measures integrator
//! convergence orders on a field with a known flow.
//!
//! Exit codes: 0 on success, 2 for configuration or usage problems, 3 when a
//! computation produced non-finite numbers, 1 for anything else.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod grid;

// ── failure classification ──

/// An error tagged with the process exit code it should produce.
pub(crate) enum Failure {
    /// Bad flags, unreadable or invalid config, mismatched shapes: exit 2.
    Usage(anyhow::Error),
    /// NaN or infinity encountered while computing: exit 3.
    Numerical(anyhow::Error),
    /// I/O and other unexpected problems: exit 1.
    Other(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Numerical(_) => 3,
            Failure::Other(_) => 1,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Numerical(e) | Failure::Other(e) => e,
        }
    }
}

pub(crate) fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(err.into())
}

pub(crate) fn numerical(err: impl Into<anyhow::Error>) -> Failure {
    Failure::Numerical(err.into())
}

pub(crate) fn other(err: impl Into<anyhow::Error>) -> Failure {
    Failure::Other(err.into())
}

pub(crate) type CmdResult = Result<(), Failure>;

// ── argument surface ──

#[derive(Parser)]
#[command(
    name = "trajflow",
    version,
    about = "Flow-matching training and inference with trajectory-consistency objectives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a run config; writes metrics.csv, checkpoints, and
    /// a resolved copy of the config.
    Train(commands::TrainArgs),
    /// Integrate flows from a checkpoint and report endpoint error, mode
    /// accuracy, straightness, and function evaluations.
    Eval(commands::EvalArgs),
    /// Sample the learned velocity field on a regular (t, x) grid as CSV.
    ExportField(commands::ExportFieldArgs),
    /// Train and evaluate the full model alongside single-removal variants.
    Ablate(commands::AblateArgs),
    /// Fit convergence orders of the fixed-step solvers on a closed-form flow.
    SolverBench(commands::SolverBenchArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Eval(args) => commands::eval(args),
        Command::ExportField(args) => commands::export_field(args),
        Command::Ablate(args) => commands::ablate(args),
        Command::SolverBench(args) => commands::solver_bench(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {:#}", failure.error());
            ExitCode::from(failure.code())
        }
    }
}
