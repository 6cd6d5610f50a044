use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the elicitation library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("malformed record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },

    #[error("only {achievable} terms survive pruning, {requested} requested")]
    VocabularyTooSmall { achievable: usize, requested: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate feature set: {0}")]
    DegenerateFeatures(String),

    #[error("prior covariance is singular with jitter {jitter:e}; raise the jitter")]
    SingularCovariance { jitter: f64 },

    #[error("ELBO decreased from {previous} to {current} at iteration {iteration}")]
    ElboDecrease {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("bad binary container: {0}")]
    Format(String),

    #[error("no feedback in batch")]
    EmptyFeedback,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config error: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Repeat {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
