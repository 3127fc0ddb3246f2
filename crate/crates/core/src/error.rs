use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures raised while loading a checkpoint file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch (stored {stored}, computed {computed})")]
    Checksum { stored: String, computed: String },
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric error in layer {layer}: {message}")]
    Numeric { layer: usize, message: String },
    #[error("numeric error: {0}")]
    NumericValue(String),
    #[error("training diverged: {0}")]
    Training(String),
    #[error("expert quality gate failed: held-out verification accuracy {accuracy:.2}% < {required:.2}%")]
    ExpertQuality { accuracy: f64, required: f64 },
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
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
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn dim(expected: usize, found: usize, what: &str) -> Self {
        Error::Dimension(format!("{what}: expected length {expected}, got {found}"))
    }
}
