//! `kae`: dataset synthesis, training, keypoint detection and detector
//! evaluation.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation
//! error.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "kae",
    version,
    about = "Unsupervised keypoint detection on point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every subcommand accepts.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Root seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file of `<command>.<flag>` settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset with train and test splits.
    Synth(commands::SynthArgs),
    /// Train a keypoint autoencoder on a dataset manifest.
    Train(commands::TrainArgs),
    /// Detect keypoints in point-cloud files with a trained model.
    Detect(commands::DetectArgs),
    /// Compare detectors by training a downstream classifier on their keypoints.
    Eval(commands::EvalArgs),
}

/// A failed invocation, split by exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn runtime(message: impl std::fmt::Display) -> Self {
        Failure::Runtime(anyhow::anyhow!("{message}"))
    }
}

impl From<kae::Error> for Failure {
    fn from(e: kae::Error) -> Self {
        use kae::Error as E;
        match e {
            E::Config(_) | E::Shape { .. } | E::LabelOutOfRange { .. } | E::PointCount { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.into()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train(args),
        Command::Detect(args) => commands::detect(args),
        Command::Eval(args) => commands::eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
