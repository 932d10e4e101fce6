//! `abcm`: train, prune, search, benchmark and evaluate channel-masked
//! image codecs from the command line.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod settings;

use settings::Settings;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn failed(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl From<abcm_core::Error> for CliError {
    fn from(e: abcm_core::Error) -> Self {
        match e {
            abcm_core::Error::Config(_) => Self::usage(e.to_string()),
            _ => Self::failed(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "abcm", version, about = "Channel-masked learned image compression")]
struct Cli {
    /// `key = value` file supplying defaults; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory that receives every artifact
    #[arg(long, global = true, env = "ABCM_OUT_DIR", default_value = "abcm-out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a codec and write the model plus loss curve
    Train(TrainArgs),
    /// Remove gated-off channels and verify the slim model
    Prune(PruneArgs),
    /// Greedy channel search on a trained model
    Search(SearchArgs),
    /// Parameter and FLOP tables plus wall-clock timing
    Bench(BenchArgs),
    /// Rate and PSNR on an image set
    Eval(EvalArgs),
    /// One training run per sparsity weight
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Hidden width of every transform layer
    #[arg(long)]
    hidden: Option<usize>,
    /// Latent channels
    #[arg(long)]
    latent: Option<usize>,
    /// deterministic, stochastic or none (no masking modules)
    #[arg(long)]
    gate: Option<String>,
    /// Surrogate sharpness of the deterministic gate
    #[arg(long)]
    epsilon: Option<f32>,
    /// Temperature of the stochastic gate
    #[arg(long)]
    tau: Option<f32>,
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    /// Training images: a directory of .ppm files, one file, or synthetic:<seed>:<count>:<size>
    #[arg(long)]
    data: Option<String>,
    /// Evaluation images, same forms as --data
    #[arg(long)]
    eval: Option<String>,
    /// Distortion weight
    #[arg(long)]
    lambda: Option<f32>,
    /// Sparsity weight
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    lr: Option<f32>,
    /// Learning rate of the masking parameters
    #[arg(long)]
    mask_lr: Option<f32>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Square training crop, a multiple of 16
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Halve both learning rates from this step on
    #[arg(long)]
    lr_halve_at: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Model file name inside the output directory
    #[arg(long)]
    model_out: Option<String>,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    /// Trained model with masking modules
    #[arg(long)]
    model: Option<PathBuf>,
    /// Images used to check the slim model against the masked one
    #[arg(long)]
    inputs: Option<String>,
    /// Largest accepted activation difference
    #[arg(long)]
    tolerance: Option<f32>,
    /// Slim model file name inside the output directory
    #[arg(long)]
    out: Option<String>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    eval: Option<String>,
    /// Largest tolerated PSNR drop in percent
    #[arg(long)]
    threshold: Option<f64>,
    /// decoder-first, encoder-first or forward
    #[arg(long)]
    order: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Reference model; adds a comparison table and speedup
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Images for the PSNR columns of the comparison
    #[arg(long)]
    eval: Option<String>,
    /// Input size as HxW, multiples of 16
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    eval: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Comma-separated sparsity weights
    #[arg(long)]
    gammas: Option<String>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(cli.config.as_deref())?;
    let mut ctx = commands::Ctx::new(cli.out_dir, settings)?;
    match cli.command {
        Command::Train(a) => commands::train(&mut ctx, a),
        Command::Prune(a) => commands::prune(&mut ctx, a),
        Command::Search(a) => commands::search(&mut ctx, a),
        Command::Bench(a) => commands::bench(&mut ctx, a),
        Command::Eval(a) => commands::eval(&mut ctx, a),
        Command::Sweep(a) => commands::sweep(&mut ctx, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("abcm: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
