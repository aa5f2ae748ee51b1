//! `mcg`: synthetic data, training, evaluation, inference and scan benchmarks.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mcg", version, about = "Bi-temporal change detection with 2D selective scans")]
struct Cli {
    /// TOML config file, or a run manifest to repeat its configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 runs sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset as root/{A,B,label}/<id>.png.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and metric log.
    Train(TrainArgs),
    /// Score predictions against labels and write overlays.
    Eval(EvalArgs),
    /// Predict the change map of one image pair.
    Infer(InferArgs),
    /// Time the 2D scan across grid sizes.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Default)]
pub struct LayoutArgs {
    /// Subdirectory of pre-change images.
    #[arg(long)]
    pub t1_dir: Option<String>,
    /// Subdirectory of post-change images.
    #[arg(long)]
    pub t2_dir: Option<String>,
    /// Subdirectory of change masks.
    #[arg(long)]
    pub label_dir: Option<String>,
}

#[derive(Args, Debug, Default)]
pub struct ModelArgs {
    /// Replace the learned flow with plain bilinear upsampling.
    #[arg(long)]
    pub no_flow: bool,
    /// Replace the 2D scan with a row-major flattened 1D scan.
    #[arg(long = "no-2ds")]
    pub no_2ds: bool,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset root.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    /// Square image side; must be a multiple of 32.
    #[arg(long)]
    pub size: Option<usize>,
    /// Index of the first sample; later indices continue the same sequence.
    #[arg(long, default_value_t = 0)]
    pub offset: u64,
    #[command(flatten)]
    pub layout: LayoutArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training dataset root.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset root evaluated during and after training.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Output directory for the checkpoint, config and log.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub layout: LayoutArgs,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Dataset root with labels.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to run; its sibling config.toml supplies the model config.
    #[arg(long, required_unless_present = "pred_dir")]
    pub checkpoint: Option<PathBuf>,
    /// Score existing `<id>.png` masks instead of running a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub pred_dir: Option<PathBuf>,
    /// Output directory for metrics.csv, predictions and overlays.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub layout: LayoutArgs,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Pre-change image.
    #[arg(long)]
    pub t1: PathBuf,
    /// Post-change image.
    #[arg(long)]
    pub t2: PathBuf,
    /// Output directory for change.png and flow maps.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write one flow colour map per decoder level.
    #[arg(long)]
    pub emit_flow: bool,
    /// Predict on square tiles of this side and stitch the results.
    #[arg(long)]
    pub tile: Option<usize>,
    /// Tile stride; defaults to the tile side.
    #[arg(long, requires = "tile")]
    pub stride: Option<usize>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Output directory for bench.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Grid sides, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// seq, par and/or oracle.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// f32 and/or f64.
    #[arg(long, value_delimiter = ',')]
    pub precisions: Option<Vec<String>>,
    #[arg(long)]
    pub state_dim: Option<usize>,
    /// Minimum timed duration per measurement.
    #[arg(long)]
    pub min_time_ms: Option<u64>,
    /// Measurements per row; the median is reported.
    #[arg(long)]
    pub samples: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let global = commands::Global {
        config: cli.config,
        seed: cli.seed,
    };
    let run = || match cli.command {
        Command::Synth(a) => commands::synth(&global, &a),
        Command::Train(a) => commands::train(&global, &a),
        Command::Eval(a) => commands::eval(&global, &a),
        Command::Infer(a) => commands::infer(&global, &a),
        Command::Bench(a) => commands::bench(&global, &a),
    };
    let result = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(anyhow::Error::from)
            .and_then(|pool| pool.install(run)),
        None => run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
