use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engagement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("parse error in record {record}: {message}")]
    Parse { record: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("single class present: {0}")]
    SingleClass(String),

    #[error("undefined statistic: {0}")]
    Undefined(String),

    #[error("model load error: {message}. {hint}")]
    ModelLoad { message: String, hint: String },

    #[error("training diverged at epoch {epoch}: {message}")]
    NonFinite { epoch: usize, message: String },

    #[error("leakage: {count} pair(s) overlap a registered evaluation set (first: {first})")]
    Leakage { count: usize, first: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
