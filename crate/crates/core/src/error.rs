use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module in the crate.
///
/// The CLI maps each variant to a one-line machine-parsable class, so new
/// variants should keep a short stable name.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("class index {index} out of range (num_classes = {num_classes})")]
    ClassIndex { index: usize, num_classes: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {detail} (byte offset {offset})")]
    Format {
        path: PathBuf,
        detail: String,
        offset: u64,
    },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("prior spec hash mismatch: checkpoint expects {expected}, file has {actual}")]
    HashMismatch { expected: String, actual: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Short stable class name used for machine-parsable CLI error lines.
    pub fn class(&self) -> &'static str {
        match self {
            Error::InvalidDimension(_) => "invalid-dimension",
            Error::Shape(_) => "shape",
            Error::ClassIndex { .. } => "class-index",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Consistency(_) => "consistency",
            Error::HashMismatch { .. } => "hash-mismatch",
            Error::NonFinite(_) => "non-finite",
            Error::Numerical(_) => "numerical",
            Error::Io { .. } => "io",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
