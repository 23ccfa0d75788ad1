use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix `{name}` is not positive definite after jitter {jitter:e}")]
    NotPositiveDefinite { name: String, jitter: f64 },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("client {client}: {source}")]
    Client {
        client: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{}: {message} at line {line}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("format version mismatch: file has `{found}`, expected `{expected}`")]
    VersionMismatch { found: String, expected: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by bad inputs rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::DimensionMismatch { .. }
            | Error::InvalidArgument(_)
            | Error::Parse { .. }
            | Error::VersionMismatch { .. }
            | Error::Config(_) => true,
            Error::Client { source, .. } | Error::Round { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
