//! Error type shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value or inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor or image shape does not match what an operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Filesystem failure, carrying the offending path.
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// PNG decode/encode failure, carrying the offending path.
    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    /// A dataset file was missing, corrupt, or inconsistent.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint could not be read, written, or did not match the run.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A numeric computation produced NaN or otherwise diverged.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// Wrap an io error with the path it happened on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
