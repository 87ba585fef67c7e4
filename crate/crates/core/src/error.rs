use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// Parameter vectors, batches or model specs that do not fit together.
    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("partition infeasible for client {client}: {reason}")]
    Partition { client: usize, reason: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    /// The client has nothing to train on and sits the round out.
    #[error("client {0} has no training data")]
    EmptyClient(usize),

    #[error("gain estimation error: {0}")]
    Estimation(String),

    #[error("failed to parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
