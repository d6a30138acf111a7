//! Command-line surface for ratio-forge: training runs, ratio fitting and
//! two-step divergence estimation.

pub mod error;
pub mod estimate;
pub mod manifest;
pub mod train;

use clap::{Parser, Subcommand};

pub use error::{CliError, CliResult, EXIT_FAILURE, EXIT_HALT, EXIT_OK, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "ratio-forge", version, about = "Bregman density-ratio estimation and b-GAN training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a generator against a ratio network and log diagnostics.
    Train(train::TrainArgs),
    /// Fit a density-ratio network to two samples and evaluate it.
    EstimateRatio(estimate::RatioArgs),
    /// Estimate an f-divergence by fitting a ratio first.
    EstimateDivergence(estimate::DivergenceArgs),
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> u8 {
    let result = match cli.command {
        Command::Train(args) => train::cmd_train(&args),
        Command::EstimateRatio(args) => estimate::cmd_estimate_ratio(&args),
        Command::EstimateDivergence(args) => estimate::cmd_estimate_divergence(&args),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Hidden layer widths given as a comma-separated list, e.g. `64,64`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Widths(pub Vec<usize>);

impl std::str::FromStr for Widths {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(Widths(Vec::new()));
        }
        s.split(',')
            .map(|w| match w.trim().parse::<usize>() {
                Ok(0) | Err(_) => Err(format!("bad layer width {w:?}")),
                Ok(n) => Ok(n),
            })
            .collect::<Result<Vec<usize>, String>>()
            .map(Widths)
    }
}
