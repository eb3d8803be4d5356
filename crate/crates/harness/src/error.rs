use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] lts_core::Error),

    #[error("{}: {error}", path.display())]
    Io { path: PathBuf, error: io::Error },

    #[error("{}: truncated at byte offset {offset}: {msg}", path.display())]
    Truncated { path: PathBuf, offset: u64, msg: String },

    #[error("{}: invalid data at byte offset {offset}: {msg}", path.display())]
    Format { path: PathBuf, offset: u64, msg: String },

    #[error("{}: unsupported checkpoint version: {msg}", path.display())]
    Version { path: PathBuf, msg: String },

    #[error("{}: shape mismatch for tensor '{name}': {msg}", path.display())]
    Shape { path: PathBuf, name: String, msg: String },

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("training diverged at iteration {iter}: loss {loss}")]
    Divergence { iter: usize, loss: f64 },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("{0}")]
    Invalid(String),
}

impl HarnessError {
    pub(crate) fn io(path: impl Into<PathBuf>, error: io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            error,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HarnessError::Invalid(msg.into())
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
