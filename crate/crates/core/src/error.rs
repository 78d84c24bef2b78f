use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("parameter mismatch: missing {missing:?}, unexpected {unexpected:?}")]
    ParamMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("no checkpoint at iteration {requested}; available iterations: {available:?}")]
    MissingCheckpoint { requested: u64, available: Vec<u64> },

    #[error("non-finite loss at iteration {iteration} (batch {batch}), rng state {rng}")]
    NonFiniteLoss {
        iteration: u64,
        batch: u64,
        rng: String,
    },

    #[error("verification failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::Config(_)
                | Error::Manifest { .. }
                | Error::ParamMismatch { .. }
                | Error::MissingCheckpoint { .. }
                | Error::Format { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
