use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("invalid value: {0}")]
    Validation(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("{}: offset {offset}: {reason}", file.display())]
    Ingestion {
        file: PathBuf,
        offset: u64,
        reason: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (lr {lr:e}); grad norms: {grad_norms}")]
    NonFinite {
        step: u64,
        lr: f64,
        grad_norms: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
