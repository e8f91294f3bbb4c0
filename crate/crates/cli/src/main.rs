//! `mcga`: batch driver for the two-stage RGB-to-hyperspectral pipeline.
//!
//! Subcommands cover the full workflow: synthetic benchmark generation,
//! stage-1 codebook training, codebook mixing, stage-2 reconstruction
//! training, inference with and without test-time adaptation, metric
//! evaluation, brightness perturbation, and ablation sweeps.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime failure.

mod commands;
mod config;
mod files;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Failures split by exit code: usage problems (2) versus runtime errors (1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<mcga_core::Error> for CliError {
    fn from(e: mcga_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "mcga",
    version,
    about = "Multi-scale codebook learning and grayscale-aware RGB-to-HSI reconstruction"
)]
struct Cli {
    /// JSON config file; explicit flags override its values, which override
    /// the built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired synthetic benchmark (train/ and val/ cube files).
    GenData(GenDataArgs),
    /// Learn the multi-scale codebooks and stage-1 autoencoder.
    TrainStage1(TrainStage1Args),
    /// Concatenate per-dataset codebook files into a mixture.
    MixCodebooks(MixArgs),
    /// Train the grayscale-aware reconstruction network on RGB/HSI pairs.
    TrainStage2(TrainStage2Args),
    /// Reconstruct hyperspectral cubes from RGB inputs.
    Infer(InferArgs),
    /// Adapt the grayscale-attention parameters on the inputs, then infer.
    TtaInfer(TtaInferArgs),
    /// Compare prediction and ground-truth directories (CSV to stdout).
    Eval(EvalArgs),
    /// Apply elementwise gamma correction to cube files.
    Perturb(PerturbArgs),
    /// Sweep one configuration axis over the synthetic benchmark.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of training pairs.
    #[arg(long)]
    pub train: Option<usize>,
    /// Number of validation pairs.
    #[arg(long)]
    pub val: Option<usize>,
    /// Spectral bands per cube.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainStage1Args {
    /// Directory of `<id>.hsi.cube` training cubes.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Number of codebook scales.
    #[arg(long)]
    pub scales: Option<usize>,
    /// Entries per codebook.
    #[arg(long)]
    pub entries: Option<usize>,
    /// Commitment weight.
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Source tag recorded in the codebooks (defaults to the data dir name).
    #[arg(long)]
    pub tag: Option<String>,
}

#[derive(Args)]
pub struct MixArgs {
    /// Codebook (.mccb) files to concatenate, in order.
    #[arg(long, num_args = 1.., required = true, value_name = "FILE")]
    pub books: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainStage2Args {
    /// Directory of paired `<id>.rgb.cube` / `<id>.hsi.cube` files.
    #[arg(long, value_name = "DIR")]
    pub data: PathBuf,
    /// Stage-1 checkpoint (.mcs1) to build on.
    #[arg(long, value_name = "FILE")]
    pub stage1: PathBuf,
    /// Optional mixture (.mccb) replacing the checkpoint's codebooks.
    #[arg(long, value_name = "FILE")]
    pub books: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Entries kept per quantized-attention query/key matrix.
    #[arg(long)]
    pub topk: Option<usize>,
    /// Fraction of feedforward channels routed through the log mapping.
    #[arg(long)]
    pub ga_ratio: Option<f64>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct InferArgs {
    /// Stage-2 checkpoint (.mcs2).
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// A single RGB cube file.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// A directory of `<id>.rgb.cube` files.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Override the checkpoint's top-K attention width.
    #[arg(long)]
    pub topk: Option<usize>,
}

#[derive(Args)]
pub struct TtaInferArgs {
    /// Stage-2 checkpoint (.mcs2).
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    /// A single RGB cube file.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// A directory of `<id>.rgb.cube` files.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Override the checkpoint's top-K attention width.
    #[arg(long)]
    pub topk: Option<usize>,
    /// Adaptation steps.
    #[arg(long)]
    pub tta_steps: Option<usize>,
    /// Adaptation learning rate.
    #[arg(long)]
    pub tta_lr: Option<f64>,
    /// Quantization-confidence softmax temperature.
    #[arg(long)]
    pub tta_temp: Option<f64>,
    /// Also write the adapted model as `adapted.mcs2`.
    #[arg(long)]
    pub persist: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Directory of prediction cubes.
    #[arg(long, value_name = "DIR")]
    pub pred: PathBuf,
    /// Directory of ground-truth cubes.
    #[arg(long, value_name = "DIR")]
    pub truth: PathBuf,
    /// Also write metrics.csv (and the run config) here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PerturbArgs {
    /// A single cube file.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// A directory of cube files (all are perturbed).
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Gamma exponent (values are raised elementwise to this power).
    #[arg(long)]
    pub gamma: f64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// Sweepable configuration axes.
#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum Axis {
    Scales,
    Topk,
    #[value(alias = "ga_ratio")]
    GaRatio,
    #[value(alias = "codebook_mode")]
    CodebookMode,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated axis values, e.g. `1,2` or `single,mixture`.
    #[arg(long)]
    pub values: String,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Run up to this many sweep points in parallel.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Seed shared by data generation and both training stages.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stage-1 epochs per point (default 75).
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    /// Stage-2 epochs per point (default 100).
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
}

/// Validate `MCGA_THREADS`: a positive integer cap on kernel parallelism.
/// All kernels currently run single-threaded, so the cap is recorded and
/// logged but never exceeded by construction.
fn kernel_threads() -> Result<usize, CliError> {
    match std::env::var("MCGA_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(1),
        Err(e) => Err(CliError::Usage(format!("MCGA_THREADS is not readable: {e}"))),
        Ok(raw) => raw
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "MCGA_THREADS must be a positive integer, got '{raw}'"
                ))
            }),
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let config = cli.config.as_deref();
    match &cli.command {
        Command::GenData(args) => commands::gen_data(args, config),
        Command::TrainStage1(args) => commands::train_stage1_cmd(args, config),
        Command::MixCodebooks(args) => commands::mix_codebooks_cmd(args),
        Command::TrainStage2(args) => commands::train_stage2_cmd(args, config),
        Command::Infer(args) => commands::infer_cmd(args, config),
        Command::TtaInfer(args) => commands::tta_infer_cmd(args, config),
        Command::Eval(args) => commands::eval_cmd(args),
        Command::Perturb(args) => commands::perturb_cmd(args),
        Command::Ablate(args) => commands::ablate_cmd(args, config),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::GenData(_) => "gen-data",
        Command::TrainStage1(_) => "train-stage1",
        Command::MixCodebooks(_) => "mix-codebooks",
        Command::TrainStage2(_) => "train-stage2",
        Command::Infer(_) => "infer",
        Command::TtaInfer(_) => "tta-infer",
        Command::Eval(_) => "eval",
        Command::Perturb(_) => "perturb",
        Command::Ablate(_) => "ablate",
    }
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout (exit 0) and usage errors
            // to stderr (exit 2).
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let threads = match kernel_threads() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    println!(
        "event=start command={} mcga_threads={threads}",
        command_name(&cli.command)
    );
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e @ CliError::Usage(_)) => {
            eprintln!("{e}");
            2
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("{e}");
            1
        }
    }
}

fn main() {
    std::process::exit(run());
}
