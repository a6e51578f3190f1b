//! `coma`: pre-training, diagnostics and data generation from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical failure, 3 I/O error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use coma_core::ComaError;

#[derive(Parser, Debug)]
#[command(name = "coma", version, about = "Complementary masked autoencoder pre-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the dual-branch training loop, writing metrics and checkpoints.
    Pretrain(PretrainArgs),
    /// Masking-frequency statistics for complementary vs single random masking.
    MaskStats(MaskStatsArgs),
    /// Finite-difference gradient checks; nonzero exit on failure.
    Gradcheck(GradcheckArgs),
    /// Reconstruct one image from a checkpoint.
    Reconstruct(ReconstructArgs),
    /// Print exact encoder parameter counts.
    Params(ParamsArgs),
    /// Time training steps.
    Bench(BenchArgs),
    /// Write a procedural image dataset.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Fusion {
    Cascade,
    Parallel,
}

/// Model and run settings shared by training commands. Flags override the
/// config file, which overrides the preset.
#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// dyvit-nano, dyvit-s or dyvit-b.
    #[arg(long)]
    pub preset: Option<String>,
    /// Config file with [model], [optim] and [train] sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Adaptive-branch mask ratio.
    #[arg(long)]
    pub ratio: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub fusion: Option<Fusion>,
    /// Include the 1×1 window branch.
    #[arg(long)]
    pub include_unit_window: bool,
    #[arg(long, value_enum, default_value = "f32")]
    pub dtype: Precision,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Dataset directory written by `synth`; a procedural corpus is generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for metrics.csv, config.txt and checkpoint.cma.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
}

#[derive(Args, Debug)]
pub struct MaskStatsArgs {
    /// Patch count.
    #[arg(long, default_value_t = 196)]
    pub n: usize,
    #[arg(long, default_value_t = 0.6)]
    pub ratio: f64,
    #[arg(long, default_value_t = 1600)]
    pub iters: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for CSV and PGM outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "dyvit-nano")]
    pub preset: String,
    /// Random instances per operation.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    /// Sampled parameters for the end-to-end check.
    #[arg(long, default_value_t = 20)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; the image is synthesized from the checkpoint seed when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Seed for the mask.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ParamsArgs {
    /// Report a single preset instead of all of them.
    #[arg(long)]
    pub preset: Option<String>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Untimed steps before measuring.
    #[arg(long, default_value_t = 1)]
    pub warmup: u64,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// A failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Numerical(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
            Failure::Io(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Numerical(m) | Failure::Io(m) => m,
        }
    }
}

impl From<ComaError> for Failure {
    fn from(e: ComaError) -> Self {
        let msg = e.to_string();
        match e {
            ComaError::Config(_) | ComaError::Usage(_) => Failure::Usage(msg),
            ComaError::Numerical(_) | ComaError::Invariant(_) => Failure::Numerical(msg),
            ComaError::Format(_) | ComaError::Io(_) => Failure::Io(msg),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(format!("i/o error: {e}"))
    }
}

/// Worker cap from `COMA_THREADS`. Execution is single-threaded, so any
/// valid value behaves like 1; invalid values are usage errors.
fn thread_cap() -> Result<usize, Failure> {
    match std::env::var("COMA_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Failure::Usage(format!("COMA_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = thread_cap().and_then(|_| match cli.command {
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::MaskStats(a) => commands::mask_stats(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Reconstruct(a) => commands::reconstruct(&a),
        Command::Params(a) => commands::params(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Synth(a) => commands::synth(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("coma: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
