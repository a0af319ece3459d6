use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LlfError>;

#[derive(Debug, Error)]
pub enum LlfError {
    #[error("invalid image dimensions {width}x{height} for {len} samples")]
    InvalidDimensions {
        width: usize,
        height: usize,
        len: usize,
    },

    #[error("dimension mismatch: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),

    #[error("image {width}x{height} too small: {reason}")]
    TooSmall {
        width: usize,
        height: usize,
        reason: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("sample ({x}, {y}) = {value} outside [0, 1] in {path}")]
    OutOfRange {
        path: PathBuf,
        x: usize,
        y: usize,
        value: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("network is in training mode; switch to inference first")]
    TrainingMode,

    #[error("batch of size {0} too small for batch statistics")]
    BatchTooSmall(usize),

    #[error("forward cache does not match the requested backward pass")]
    MissingCache,

    #[error("identity pretraining stopped after {steps} steps at max error {achieved:.3e}")]
    PretrainDiverged { steps: usize, achieved: f64 },

    #[error("non-finite loss at epoch {epoch}, pair {pair}: mse={mse}, mssim={mssim}")]
    NonFiniteLoss {
        epoch: usize,
        pair: usize,
        mse: f64,
        mssim: f64,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("stale tape: {0}")]
    StaleTape(String),

    #[error("model format error: {0}")]
    Model(String),
}

impl LlfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LlfError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn decode(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        LlfError::Decode {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
