use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("singular operation: {0}")]
    Singularity(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("integrity error in {}: {reason}", file.display())]
    Integrity { file: PathBuf, reason: String },

    #[error("pipeline error at frame {frame}: {source}")]
    Pipeline {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("refused: {0}")]
    Refusal(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn integrity(file: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            file: file.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
