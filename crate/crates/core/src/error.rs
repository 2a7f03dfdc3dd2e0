use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("diverged: {0}")]
    Divergence(String),

    #[error("configuration error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("insufficient samples for class {class}: need {needed}, have {available} (deficit {})", .needed - .available)]
    Capacity {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("{path}: {kind}")]
    Idx { path: PathBuf, kind: IdxError },

    #[error("schema mismatch: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("file truncated: header declares {declared} bytes of payload, found {found}")]
    Truncated { declared: usize, found: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    /// Prefixes a divergence message with outer context, leaves other kinds alone.
    pub fn context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::Divergence(msg) => Error::Divergence(format!("{ctx}: {msg}")),
            other => other,
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension { expected, got })
    }
}
