use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad IDX header in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("IDX payload length mismatch: header declares {expected} bytes, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("partition too small: need at least {min} images, got {got}")]
    PartitionTooSmall { min: usize, got: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite loss at step {step} (discriminator {d_loss}, generator {g_loss})")]
    NonFiniteLoss { step: u64, d_loss: f64, g_loss: f64 },

    #[error("feature extractor reached only {accuracy:.4} test accuracy (required {required:.2})")]
    TrainingFailed { accuracy: f64, required: f64 },

    #[error("parse error at {entry}: {reason}")]
    Parse { entry: String, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
