use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite values produced by layer {layer}")]
    Numeric { layer: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("missing predictions for {} utterance(s): {}", .0.len(), .0.join(","))]
    MissingPredictions(Vec<String>),

    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid-input",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Numeric { .. } => "numeric",
            Error::UndefinedMetric(_) => "undefined-metric",
            Error::MissingPredictions(_) => "missing-predictions",
            Error::Shape(_) => "shape",
        }
    }
}
