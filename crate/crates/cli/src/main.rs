#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Parser)]
#[command(name = "region-embed", version, about = "Multi-view urban region embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-factor synthetic dataset.
    Synth(SynthArgs),
    /// Train a model and export region embeddings.
    Train(TrainArgs),
    /// Score embeddings with k-fold Lasso regression.
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate over a grid of widths and fusion depths.
    Grid(GridArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub regions: usize,
    #[arg(long, default_value_t = 4)]
    pub latent: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

/// Model and optimizer overrides shared by `train` and `grid`.
#[derive(Args, Clone, Default)]
pub struct ModelFlags {
    /// JSON settings file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Embedding width.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// ViewFusion projection width.
    #[arg(long)]
    pub fusion_latent: Option<usize>,
    /// InterAFL memory size.
    #[arg(long)]
    pub memory: Option<usize>,
    /// RegionSA convolution channels.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub intra_layers: Option<usize>,
    #[arg(long)]
    pub inter_layers: Option<usize>,
    #[arg(long)]
    pub fusion_layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "rerun")]
    pub embeddings: Option<PathBuf>,
    #[arg(long, required_unless_present = "rerun")]
    pub data: Option<PathBuf>,
    #[arg(long, required_unless_present = "rerun")]
    pub task: Option<String>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Lasso L1 strength.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; defaults to `eval_<task>` beside the embeddings.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Repeat the evaluation recorded in an earlier run manifest.
    #[arg(long, conflicts_with_all = ["embeddings", "data", "task", "folds", "alpha", "seed", "config"])]
    pub rerun: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Minimum number of coordinates to check.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Directory for the JSON report and run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GridArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "36,72,144,288")]
    pub d_list: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub layers_list: Vec<usize>,
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Cells trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub force: bool,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Grid(a) => commands::grid(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
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
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
