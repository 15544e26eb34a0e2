use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad shapes, hyperparameters, or layer references.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called in the wrong state (e.g. finalizing an empty estimator).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// Invalid numeric input such as a non-positive reference deviation.
    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("format error in {entry}: {reason}")]
    Format { entry: String, reason: String },

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("divergence at step {step}: {component} = {value}")]
    Divergence {
        step: usize,
        component: String,
        value: f64,
    },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(entry: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            entry: entry.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
