use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "catq", version, about = "Post-training quantization with cluster-based affine logit correction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Min-max initialize and refine quantization parameters against the KL objective.
    Calibrate(CalibrateArgs),
    /// Fit the cluster-based affine correction and add it to a bundle.
    CatFit(CatFitArgs),
    /// Compare no correction, plain affine and CAT on held-out data.
    Evaluate(EvaluateArgs),
    /// Refit CAT across a grid of one hyperparameter.
    Sweep(SweepArgs),
    /// Generate synthetic data and run the whole pipeline.
    Demo(DemoArgs),
}

#[derive(Args)]
pub struct QuantArgs {
    /// Weight bit-width of hidden layers (default: from the model file).
    #[arg(long)]
    pub wbits: Option<u32>,
    /// Activation bit-width (default: from the model file).
    #[arg(long)]
    pub abits: Option<u32>,
    /// Weight bit-width of the final layer (default: from the model file).
    #[arg(long)]
    pub last_bits: Option<u32>,
}

#[derive(Args)]
pub struct CatArgs {
    /// Blend weight between raw and corrected logits, in [0, 1].
    #[arg(long, default_value_t = catq::cat::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Number of k-means clusters.
    #[arg(long, default_value_t = catq::clustering::DEFAULT_CLUSTERS)]
    pub clusters: usize,
    /// PCA dimension (default: min(50, samples - 1, logit width)).
    #[arg(long)]
    pub pca_dim: Option<usize>,
    /// Variance guard added to each low-bit variance.
    #[arg(long, default_value_t = catq::cat::DEFAULT_EPSILON)]
    pub epsilon: f64,
}

/// Where logit pairs come from: a model run over inputs, or a stacked
/// `2 x n x d` pair file (low-bit first).
#[derive(Args)]
pub struct SourceArgs {
    /// Model JSON file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Input tensor file (`n x input_dim`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Stacked logit-pair tensor file (`2 x n x d`).
    #[arg(long, conflicts_with_all = ["model", "data"])]
    pub pairs: Option<PathBuf>,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Calibration inputs (`n x input_dim`).
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub quant: QuantArgs,
    /// Softmax temperature of the objective.
    #[arg(long, default_value_t = catq::calibration::DEFAULT_TEMPERATURE)]
    pub temp: f64,
    /// Weight of the drift penalty.
    #[arg(long, default_value_t = catq::calibration::DEFAULT_LAMBDA_P)]
    pub lambda_p: f64,
    /// Use only the first N calibration rows.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for bundle.json and trace.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CatFitArgs {
    /// Calibrated bundle to extend (required with --model).
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[command(flatten)]
    pub source: SourceArgs,
    #[command(flatten)]
    pub cat: CatArgs,
    /// Use only the first N fitting rows.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for the updated bundle.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Rank-1 tensor of class indices.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Override the stored CAT blend weight.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Directory to write eval.csv into (always printed to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Calibrated bundle (required with --model).
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Held-out inputs (with --model).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Held-out stacked logit pairs (with --pairs).
    #[arg(long)]
    pub eval_pairs: Option<PathBuf>,
    /// Class indices of the held-out rows.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// alpha, clusters, pca_dim or samples.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated grid values.
    #[arg(long)]
    pub grid: String,
    #[command(flatten)]
    pub cat: CatArgs,
    /// Number of seeds (seed, seed + 1, ...) averaged per grid point.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory to write sweep_<axis>.csv into (always printed to stdout).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(a) => commands::calibrate(a),
        Command::CatFit(a) => commands::cat_fit(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Demo(a) => commands::demo(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.stage, f.error);
            if f.error.is_user_error() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
