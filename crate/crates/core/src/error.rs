use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum DclError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("corrupt data in {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at step {step}: {what}")]
    Numeric { step: usize, what: String },

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("cosine similarity undefined: zero-norm vector ({0})")]
    ZeroNorm(String),

    #[error("contrastive estimate needs at least one negative (batch of {0})")]
    InsufficientNegatives(usize),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("training diverged at epoch {epoch}, batch {batch}: {what}")]
    Divergence {
        epoch: usize,
        batch: usize,
        what: String,
    },

    #[error("incompatible checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, DclError>;

impl DclError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DclError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        DclError::Json {
            path: path.into(),
            source,
        }
    }
}
