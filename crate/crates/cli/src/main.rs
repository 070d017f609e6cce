//! `mnl` — train, evaluate, and certify desk-scale multimodal late-fusion
//! classifiers with negative-learning guidance.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config/usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// A command failure carrying its exit code: 2 for config/usage problems,
/// 1 for runtime failures.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<mnl_core::Error> for Failure {
    fn from(e: mnl_core::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "mnl",
    version,
    about = "Multimodal negative-learning trainer with robustness certification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override guidance strength
    #[arg(long)]
    lambda: Option<f64>,
    /// Override guidance mode: prior, confident, or robust
    #[arg(long)]
    guidance: Option<String>,
    /// Guiding modality for prior mode
    #[arg(long)]
    rdm: Option<usize>,
    /// Override guidance scope: non-target or all-class
    #[arg(long)]
    scope: Option<String>,
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Trained model checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluation data container; defaults to the config's synthetic test split
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run the attack search and add its column to the report
    #[arg(long)]
    attack: bool,
    /// Sensitivity constants: exact-linear or sampled
    #[arg(long)]
    tau: Option<String>,
    /// What the report claims: certified or estimate
    #[arg(long)]
    claim: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Override noise degrees, e.g. 0,5,10
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    /// Override the seed list, e.g. 0,1,2
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Override noise kinds, e.g. gaussian,mask
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
    /// Override guidance strength for the trained models
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of random configurations per check
    #[arg(long, default_value_t = 100)]
    configs: usize,
}

#[derive(Args)]
struct OverheadArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Timed optimizer steps per variant (minimum 100)
    #[arg(long, default_value_t = 200)]
    iterations: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and write container + CSV mirrors
    Gen(CommonArgs),
    /// Train a fused model; writes metrics.csv and checkpoints
    Train(TrainArgs),
    /// Lower-bound the robustness radius of a trained checkpoint
    Certify(CertifyArgs),
    /// Train per seed and evaluate under the configured noise grid
    Sweep(SweepArgs),
    /// Verify analytic gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Measure per-iteration training overhead of guidance
    Overhead(OverheadArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => commands::cmd_gen(args),
        Command::Train(args) => commands::cmd_train(args),
        Command::Certify(args) => commands::cmd_certify(args),
        Command::Sweep(args) => commands::cmd_sweep(args),
        Command::Gradcheck(args) => commands::cmd_gradcheck(args),
        Command::Overhead(args) => commands::cmd_overhead(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
