//! Experiment harness: certificate verification, bound computation,
//! paired simulation, Monte Carlo disturbance studies and recurrence
//! planning, each producing CSV traces and a JSON summary.
//!
//! Exit codes: 0 success, 2 configuration error, 3 verification failure,
//! 4 runtime violation.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub mod commands;
pub mod config;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("runtime violation: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Verification(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Verification(_) => "verification",
            CliError::Runtime(_) => "runtime",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "symabs", version, about = "Robust symbolic models through a control interface")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Configuration file, or a builtin name: example1, example2.
    #[arg(long, global = true, default_value = "example1")]
    pub config: String,
    /// Base seed; realization i uses seed + i.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = config::OUT_DIR_ENV)]
    pub out: Option<PathBuf>,
    /// Number of disturbance realizations.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Integration step.
    #[arg(long, global = true)]
    pub dt: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Check the certificate's matrix inequality and falsify its constraints.
    VerifyCertificate,
    /// Admissible discretization, disturbance radius and input map.
    Bounds,
    /// One paired run of the concrete system and its abstraction.
    Simulate,
    /// Paired runs over seeded disturbance realizations.
    Montecarlo,
    /// Recurrence plan over the workspace and its closed-loop validation.
    Plan,
}

/// Outcome of a command: the JSON summary and whether it passed.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub summary: serde_json::Value,
    pub passed: bool,
    /// Exit code when the command completed but did not pass.
    pub failure_code: i32,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            self.failure_code
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome, CliError> {
    let overrides = config::Overrides {
        seed: cli.common.seed,
        trials: cli.common.trials,
        dt: cli.common.dt,
        out: cli.common.out.clone(),
    };
    let exp = config::load(&cli.common.config, &overrides)?;
    match cli.command {
        Command::VerifyCertificate => commands::verify_certificate(&exp),
        Command::Bounds => commands::bounds(&exp),
        Command::Simulate => commands::simulate(&exp),
        Command::Montecarlo => commands::montecarlo(&exp),
        Command::Plan => commands::plan(&exp),
    }
}

/// Runs the parsed command, printing the summary to stdout or a structured
/// error to stderr, and returns the process exit code.
pub fn main_with(cli: &Cli) -> i32 {
    match run(cli) {
        Ok(outcome) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&outcome.summary).expect("summary serializes")
            );
            outcome.exit_code()
        }
        Err(e) => {
            let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            e.exit_code()
        }
    }
}
