use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid argument: shape mismatch, out-of-range parameter, bad window size.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data violates a value contract (non-finite pixels, bad labels).
    #[error("data error: {0}")]
    Data(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("segmentation mask has no labelled pixels")]
    EmptyMask,

    #[error("empty dataset split: {0}")]
    EmptySplit(String),

    #[error("failed to ingest {}: {message}", path.display())]
    Ingestion { path: PathBuf, message: String },

    #[error("non-finite {term} loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        term: String,
        epoch: usize,
        batch: usize,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
