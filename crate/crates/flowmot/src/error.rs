//! Crate-wide error type with stable machine-parsable codes.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: unknown key `{key}`")]
    UnknownKey {
        path: String,
        line: usize,
        key: String,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("empty ground truth")]
    EmptyGroundTruth,

    #[error("missing checkpoint: provider `{0}` requires a trained model")]
    MissingCheckpoint(String),

    #[error("sequence mismatch: {0}")]
    SequenceMismatch(String),

    #[error("checkpoint format: {0}")]
    CheckpointFormat(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable code for scripted consumers; printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "E_PARSE",
            Error::UnknownKey { .. } => "E_CONFIG_KEY",
            Error::InvalidInput(_) => "E_INVALID_INPUT",
            Error::Numerical(_) => "E_NUMERICAL",
            Error::EmptyGroundTruth => "E_EMPTY_GT",
            Error::MissingCheckpoint(_) => "E_MISSING_CHECKPOINT",
            Error::SequenceMismatch(_) => "E_SEQUENCE_MISMATCH",
            Error::CheckpointFormat(_) => "E_CHECKPOINT_FORMAT",
            Error::Io(_) => "E_IO",
        }
    }
}
