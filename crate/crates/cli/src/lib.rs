//! `cohar` command-line driver.
//!
//! Exit codes: 0 success, 2 configuration or data error, 3 refusal to
//! overwrite an output directory, 4 numeric divergence, 5 gradient-check
//! failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
mod output;

pub use config::{DataSource, ExperimentConfig};
pub use output::CliError;

#[derive(Debug, Parser)]
#[command(name = "cohar", version, about = "Dense multi-label activity recognition with chained UNets")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (data.csv + meta.json)
    Synth {
        /// Synthetic-data config (JSON); defaults when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Train a chained model, or the independent baseline
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train the single-UNet baseline instead of the chain
        #[arg(long)]
        baseline: bool,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Score a checkpoint on a labeled CSV dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// data.csv, or a directory containing it
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Write dense predictions for a CSV dataset
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Finite-difference check of every differentiable op
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Adds an op with a deliberately wrong backward rule
        #[arg(long, hide = true)]
        inject_faulty_op: bool,
    },
    /// Baseline vs both chain orders over several seeds
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[command(flatten)]
        out: OutArgs,
    },
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, out } => commands::synth(config.as_deref(), &out.out, out.force),
        Command::Train { config, baseline, out } => commands::train(&config, baseline, &out.out, out.force),
        Command::Eval { checkpoint, data, out } => commands::eval(&checkpoint, &data, &out.out, out.force),
        Command::Predict { checkpoint, data, out } => commands::predict(&checkpoint, &data, &out.out, out.force),
        Command::Gradcheck { seed, inject_faulty_op } => commands::gradcheck(seed, inject_faulty_op),
        Command::Compare { config, seeds, out } => commands::compare(&config, seeds, &out.out, out.force),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
