//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or truncated input file (IDX datasets, checkpoints).
    #[error("format error in {path}: {message} (at byte offset {offset})")]
    Format {
        path: PathBuf,
        message: String,
        offset: u64,
    },

    /// A caller violated an API contract (shape mismatch, out-of-range argument).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration value or missing input named by the config.
    #[error("configuration error: {0}")]
    Config(String),

    /// Numerical failure during training (divergence, NaN loss).
    #[error("training failed at step {step}: {message}")]
    Training { step: usize, message: String },

    /// The two enumeration routes of the subset search disagreed.
    #[error("oracle consistency violation: {0}")]
    OracleInconsistency(String),

    #[error("checkpoint error in {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding error: {0}")]
    Image(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for user/config errors, 3 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Training { .. } | Error::OracleInconsistency(_) => 3,
            _ => 2,
        }
    }
}
