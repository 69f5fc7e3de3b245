//! `seunet`: train, evaluate and inspect seUNet-Trans segmentation models.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "seunet", version, about = "seUNet-Trans binary segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model on a manifest, writing checkpoints and a log.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Write probability maps and binary masks for a manifest.
    Predict(PredictArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic ellipse dataset.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Plain `key=value` file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// L, M or S.
    #[arg(long)]
    variant: Option<String>,
    /// Encoder width preset: desk, paper or thin.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Square input size; defaults to the manifest's `#size`.
    #[arg(long)]
    size: Option<usize>,
    /// Checkpoints and `train.log` go here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    /// Where `report.txt` and `report.kv` are written.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Tolerance for every operator-level case (default: 1e-6 smooth,
    /// 1e-4 piecewise).
    #[arg(long)]
    tolerance: Option<f64>,
    /// Tolerance for the end-to-end model case.
    #[arg(long, default_value_t = seunet_core::gradsuite::END_TO_END_TOL)]
    e2e_tolerance: f64,
    #[arg(long, default_value_t = 20)]
    seeds: usize,
    /// Only run cases whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("seunet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
