use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("sequence too long: {len} tokens exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence too short: {len} tokens, need at least {min}")]
    SequenceTooShort { len: usize, min: usize },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
