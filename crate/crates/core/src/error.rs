use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("packed length {needed} exceeds max_len {max_len}")]
    Truncation { needed: usize, max_len: usize },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("epoch {epoch}, step {step}: {source}")]
    Training {
        epoch: usize,
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
