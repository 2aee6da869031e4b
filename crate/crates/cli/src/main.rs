mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Train quantized embedding tables in low precision and probe the
/// convergence of quantized SGD.
#[derive(Debug, Parser)]
#[command(name = "lpq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Encode a delimited CTR file into a dataset and vocabulary.
    Preprocess(PreprocessArgs),
    /// Train one run and write its metrics, manifest and checkpoint.
    Train(TrainArgs),
    /// Quantized SGD on the separable quadratic, with bound and error checks.
    SynthLab(LabArgs),
    /// Tabulate the convergence bounds.
    Bounds(BoundsArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_parser = ["criteo", "avazu", "generic"], default_value = "generic")]
    pub kind: String,
    /// Tokens seen fewer times collapse into the field's OOV id. Defaults
    /// per dataset kind.
    #[arg(long)]
    pub threshold: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config, or a run manifest (`.json`) to replay; flags override
    /// its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set data.samples=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, value_parser = ["fp", "qat-lsq", "qat-pact", "lpt", "alpt"])]
    pub regime: Option<String>,
    #[arg(long, value_parser = ["dr", "sr"])]
    pub rounding: Option<String>,
    #[arg(long)]
    pub bits: Option<u8>,
    #[arg(long)]
    pub delta_init: Option<f64>,
    #[arg(long)]
    pub delta_lr: Option<f64>,
    #[arg(long, value_parser = ["none", "dq", "bdq"])]
    pub grad_scale: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Encoded dataset written by `preprocess`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Vocabulary manifest matching `--data`.
    #[arg(long, requires = "data")]
    pub vocab: Option<PathBuf>,
    /// Output directory; defaults to the config's `out` key, then `runs/<run id>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LabArgs {
    #[arg(long, default_value_t = 0.01)]
    pub delta: f64,
    #[arg(long, default_value_t = 8)]
    pub bits: u8,
    #[arg(long, default_value_t = 1000)]
    pub params: usize,
    /// Base learning rate of the `eta / sqrt(t)` schedule.
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[arg(long, value_delimiter = ',', default_value = "fp,lpt-dr,lpt-sr")]
    pub regimes: Vec<String>,
    #[arg(long, default_value_t = 1000)]
    pub iterations: u64,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// First seed; runs use `seed..seed + seeds`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "10,100,1000")]
    pub snapshots: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// Defaults to the width of the representable range.
    #[arg(long)]
    pub diameter: Option<f64>,
    /// Defaults to the largest gradient of the lab objective on the
    /// representable range.
    #[arg(long)]
    pub grad_bound: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub delta: f64,
    #[arg(long, default_value_t = 8)]
    pub bits: u8,
    #[arg(long = "t", value_delimiter = ',', default_value = "10,100,1000")]
    pub ts: Vec<u64>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Train(a) => commands::train(&a),
        Command::SynthLab(a) => commands::synth_lab(&a),
        Command::Bounds(a) => commands::bounds(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
