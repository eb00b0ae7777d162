use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: {component} loss is {value}{}", checkpoint_hint(.last_checkpoint))]
    Divergence {
        component: &'static str,
        value: f64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("checkpoint integrity check failed for {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("checkpoint was written for config {found}, expected {expected}")]
    ConfigHashMismatch { expected: String, found: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing required config keys: {}", .0.join(", "))]
    MissingKeys(Vec<String>),

    #[error("dataset not found at {0}")]
    DatasetMissing(PathBuf),

    #[error("missing annotation file {0}")]
    MissingAnnotation(PathBuf),

    #[error("disk full while writing {0}")]
    DiskFull(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn checkpoint_hint(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" (last good checkpoint: {})", p.display()),
        None => " (no checkpoint written yet)".to_string(),
    }
}

impl Error {
    /// Wraps an I/O error, mapping out-of-space conditions to [`Error::DiskFull`].
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::StorageFull {
            Error::DiskFull(path)
        } else {
            Error::Io { path, source }
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
