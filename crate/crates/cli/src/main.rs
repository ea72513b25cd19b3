//! `autransfer`: data generation, the two training stages, threshold
//! calibration and evaluation from the command line.
//!
//! Exit codes: 0 success, 2 usage, 3 I/O, 4 format or shape conflict.

mod commands;
mod settings;

use std::fmt;
use std::process::ExitCode;

use autransfer::Error;
use clap::{Args, Parser, Subcommand};

use settings::List;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub msg: String,
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }

    pub fn io(msg: impl Into<String>) -> Self {
        CliError { code: 3, msg: msg.into() }
    }

    pub fn format(msg: impl Into<String>) -> Self {
        CliError { code: 4, msg: msg.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(_) => CliError::io(e.to_string()),
            _ => CliError::format(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "autransfer", version, about = "Two-stage transfer learning for facial action units")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic expression/AU dataset.
    GenData(GenDataArgs),
    /// Stage one: train backbone and expression head.
    Pretrain(PretrainArgs),
    /// Stage two: transfer a pretrained backbone and train the AU head.
    Finetune(FinetuneArgs),
    /// Choose per-AU thresholds from scores and labels.
    Calibrate(CalibrateArgs),
    /// Score a dataset with a checkpoint and report metrics.
    Evaluate(EvaluateArgs),
    /// Subject-independent k-fold cross-validation of stage one.
    Crossval(CrossvalArgs),
    /// Generate data, pretrain, fine-tune and calibrate in one run.
    Pipeline(PipelineArgs),
}

#[derive(Args)]
pub struct Common {
    /// key=value config file; flags take precedence over it.
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub no_shuffle: bool,
}

#[derive(Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(short = 'o', long)]
    pub output: Option<String>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub per_subject: Option<usize>,
    #[arg(long)]
    pub input_dim: Option<usize>,
    #[arg(long)]
    pub num_expressions: Option<usize>,
    #[arg(long)]
    pub num_aus: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub subject_offset_sigma: Option<f64>,
    #[arg(long)]
    pub au_flip_prob: Option<f64>,
    #[arg(long)]
    pub imbalance_skew: Option<f64>,
}

#[derive(Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(short = 'o', long)]
    pub output: Option<String>,
    /// Backbone hidden widths, e.g. `128,64`.
    #[arg(long)]
    pub backbone: Option<List<usize>>,
    #[arg(long)]
    pub num_expressions: Option<usize>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub data: Option<String>,
    /// Optional held-out dataset for validation metrics.
    #[arg(long)]
    pub val_data: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(short = 'o', long)]
    pub output: Option<String>,
    /// AU head hidden widths, e.g. `32,16`.
    #[arg(long)]
    pub au_hidden: Option<List<usize>>,
    #[arg(long)]
    pub freeze_backbone: bool,
    #[arg(long)]
    pub pos_weighting: bool,
}

#[derive(Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub config: Option<String>,
    /// Score file written by `evaluate`.
    #[arg(long)]
    pub scores: Option<String>,
    /// Dataset providing the AU labels for the scored samples.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(short = 'o', long)]
    pub output: Option<String>,
    /// Ascending thresholds in (0,1); must include 0.5.
    #[arg(long)]
    pub grid: Option<List<f64>>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub thresholds: Option<String>,
    #[arg(short = 'o', long)]
    pub output: Option<String>,
}

#[derive(Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub train: TrainFlags,
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub backbone: Option<List<usize>>,
    #[arg(long)]
    pub num_expressions: Option<usize>,
    #[arg(short = 'o', long)]
    pub output: Option<String>,
}

#[derive(Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(short = 'o', long)]
    pub output: Option<String>,
    #[arg(long)]
    pub subjects: Option<usize>,
    #[arg(long)]
    pub per_subject: Option<usize>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub au_flip_prob: Option<f64>,
    #[arg(long)]
    pub epochs_stage1: Option<usize>,
    #[arg(long)]
    pub epochs_stage2: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub au_label_fraction: Option<f64>,
    #[arg(long)]
    pub backbone: Option<List<usize>>,
    #[arg(long)]
    pub au_hidden: Option<List<usize>>,
    #[arg(long)]
    pub grid: Option<List<f64>>,
    #[arg(long)]
    pub freeze_backbone: bool,
    #[arg(long)]
    pub pos_weighting: bool,
    /// Skip stage one and train the AU model from random initialisation.
    #[arg(long)]
    pub scratch: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Crossval(a) => commands::crossval(a),
        Command::Pipeline(a) => commands::pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
