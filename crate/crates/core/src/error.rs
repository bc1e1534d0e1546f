use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TklError>;

#[derive(Debug, Error)]
pub enum TklError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}:{line}: {message}")]
    Format {
        file: String,
        line: usize,
        message: String,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("duplicate id `{0}`")]
    DuplicateId(String),

    #[error("unknown id(s): {0}")]
    UnknownId(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss in batch {batch} at step {step} (triples {triples})")]
    NonFiniteLoss {
        step: usize,
        batch: usize,
        triples: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl TklError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TklError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        TklError::Format {
            file: file.into(),
            line,
            message: message.into(),
        }
    }

    /// Short, stable class name for machine-parsable error lines.
    pub fn class(&self) -> &'static str {
        match self {
            TklError::Io { .. } => "io",
            TklError::Format { .. } => "format",
            TklError::Argument(_) => "argument",
            TklError::DuplicateId(_) => "duplicate-id",
            TklError::UnknownId(_) => "unknown-id",
            TklError::Empty(_) => "empty-input",
            TklError::NonFiniteLoss { .. } => "non-finite-loss",
            TklError::Config(_) => "config",
            TklError::Checkpoint(_) => "checkpoint",
        }
    }
}
