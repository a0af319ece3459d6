//! Command-line surface for the trainable local Laplacian filter: dataset
//! synthesis, training, application, evaluation, remap inspection and the
//! histogram-matching baseline.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use llf_core::imageio::BitDepth;
use llf_core::LlfError;
use serde::Serialize;
use thiserror::Error;

mod apply;
pub mod baseline;
pub mod eval;
mod inspect;
pub mod synth;
pub mod train;

pub use train::Variant;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config file {path}: {reason}")]
    ConfigFile { path: PathBuf, reason: String },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] LlfError),
}

impl CliError {
    /// 2 bad arguments, 3 data error, 4 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::ConfigFile { .. } => 2,
            CliError::Core(LlfError::InvalidParameter(_)) => 2,
            CliError::Core(LlfError::NonFiniteLoss { .. } | LlfError::PretrainDiverged { .. }) => 4,
            CliError::Write { .. } | CliError::Core(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "llfstyle",
    version,
    about = "Learn and apply local Laplacian filter styles"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom/target pairs and a ground-truth manifest.
    Synth(SynthArgs),
    /// Train a remap (and optionally the affine layer) on paired images.
    Train(train::TrainArgs),
    /// Apply a trained model to one image.
    Apply(ApplyArgs),
    /// SSIM/MSE report of a model on a paired dataset.
    Eval(EvalArgs),
    /// Export the learned remap curve and its monotonicity report.
    Inspect(InspectArgs),
    /// Fit and evaluate the gradient-histogram baseline.
    Baseline(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Width and height in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.3)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.2)]
    pub gamma: f64,
    #[arg(long, default_value_t = 0.05)]
    pub omega: f64,
    /// Image container: pgm or png (16-bit either way).
    #[arg(long, default_value = "pgm", value_parser = ["pgm", "png"])]
    pub format: String,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Output bit depth for PNG/PGM.
    #[arg(long, default_value = "16", value_parser = parse_depth)]
    pub depth: BitDepth,
    /// Also write the Gaussian and Laplacian pyramids of the filter output.
    #[arg(long)]
    pub dump_pyramid: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Baseline curve CSV to evaluate on the same pairs.
    #[arg(long)]
    pub baseline_curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub curve: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["input", "data_dir"])))]
pub struct BaselineArgs {
    #[arg(long, requires = "target")]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    pub target: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["input", "target"])]
    pub data_dir: Option<PathBuf>,
    /// Output directory for the curve, report and (single pair) image.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = llf_core::metrics::HISTOGRAM_BINS)]
    pub bins: usize,
    #[arg(long, default_value_t = llf_core::llf::DEFAULT_LUT_LEVELS)]
    pub lut_levels: usize,
}

fn parse_depth(s: &str) -> std::result::Result<BitDepth, String> {
    let bits: u32 = s.parse().map_err(|_| format!("not a bit depth: {s}"))?;
    BitDepth::from_bits(bits).map_err(|e| e.to_string())
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(a) => synth::run(&a),
        Command::Train(a) => train::run(&a),
        Command::Apply(a) => apply::run(&a),
        Command::Eval(a) => eval::run(&a),
        Command::Inspect(a) => inspect::run(&a),
        Command::Baseline(a) => baseline::run(&a),
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("report types serialize");
    write_file(path, text + "\n")
}

pub(crate) fn create_dir(path: &Path) -> CliResult<()> {
    std::fs::create_dir_all(path).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// `model.json` + `suffix` -> `model.<suffix>` next to it.
pub(crate) fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    path.with_file_name(format!("{stem}.{suffix}"))
}
