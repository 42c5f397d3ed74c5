//! `lvit`: train, evaluate and query the lightweight SAR vision transformer.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lvit_core::{HeatmapScale, LvitError, ResizeMode};

#[derive(Parser, Debug)]
#[command(name = "lvit", version, about = "Lightweight vision transformer for SAR target chips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, log and resolved config to --out.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset: confusion matrix, heatmap, metrics.
    Eval(EvalArgs),
    /// Classify a single image.
    Predict(PredictArgs),
    /// Compare backprop gradients with finite differences on a tiny model.
    Gradcheck(GradcheckArgs),
    /// Write the synthetic dataset as a class-per-directory PGM tree.
    Synth(SynthArgs),
}

/// Where samples come from. Either may also be given in the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct DataArgs {
    /// Image tree laid out as DIR/<class>/<image>.
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
    pub data: Option<PathBuf>,
    /// Use N generated samples per class instead of --data.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    /// Speckle strength for --synthetic.
    #[arg(long)]
    pub noise: Option<f64>,
    /// How images are brought to 48x48: crop-resize, crop or resize.
    #[arg(long, value_name = "MODE")]
    pub resize_mode: Option<ResizeMode>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// key=value file; flags override its entries.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Start from this checkpoint's weights instead of a fresh initialization.
    #[arg(long, value_name = "PATH")]
    pub warm_start: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// key=value file; model keys in it must agree with the checkpoint.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Heatmap shading: row-normalized or counts.
    #[arg(long, value_enum, default_value = "row")]
    pub heatmap_scale: ScaleArg,
    /// Heatmap file type.
    #[arg(long, value_enum, default_value = "ppm")]
    pub heatmap_format: HeatmapFormat,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum ScaleArg {
    Row,
    Counts,
}

impl From<ScaleArg> for HeatmapScale {
    fn from(s: ScaleArg) -> Self {
        match s {
            ScaleArg::Row => HeatmapScale::RowNormalized,
            ScaleArg::Counts => HeatmapScale::Counts,
        }
    }
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum HeatmapFormat {
    Ppm,
    Png,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub image: PathBuf,
    #[arg(long, value_name = "MODE", default_value = "crop-resize")]
    pub resize_mode: ResizeMode,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Scale the GELU backward rule by this factor (fault injection for testing).
    #[arg(long, hide = true)]
    pub corrupt_backward: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long, value_name = "N")]
    pub per_class: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

/// A failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

pub mod exit {
    pub const CONFIG: u8 = 2;
    pub const DATA: u8 = 3;
    pub const NUMERICAL: u8 = 4;
    pub const MISMATCH: u8 = 5;
    pub const GRADCHECK: u8 = 6;
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }

    /// Default classification of library errors.
    pub fn from_lvit(e: LvitError) -> Self {
        let code = match &e {
            LvitError::Config(_) | LvitError::Param(_) => exit::CONFIG,
            LvitError::NonFinite(_) => exit::NUMERICAL,
            LvitError::Compat(_) | LvitError::Format(_) => exit::MISMATCH,
            LvitError::Ingest { .. }
            | LvitError::Truncated(_)
            | LvitError::Io { .. }
            | LvitError::Contract(_)
            | LvitError::Shape { .. } => exit::DATA,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<LvitError> for Failure {
    fn from(e: LvitError) -> Self {
        Failure::from_lvit(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Predict(a) => commands::predict_cmd(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
