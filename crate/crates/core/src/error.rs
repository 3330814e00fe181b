use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },

    #[error("invalid shape {0:?}: every extent must be at least 1")]
    InvalidShape([usize; 3]),

    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: [usize; 3], len: usize },

    #[error("non-finite value {value} at voxel {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("mask value {value} at voxel {index} is not 0 or 1")]
    NonBinary { index: usize, value: u8 },

    #[error("no target to prompt: mask is empty")]
    EmptyMask,

    #[error("empty component")]
    EmptyComponent,

    #[error("context set is empty")]
    EmptyContext,

    #[error("prompt type mismatch: model expects {expected}, got {actual}")]
    PromptTypeMismatch { expected: String, actual: String },

    #[error("invalid config `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("insufficient samples: need {needed}, have {available}")]
    InsufficientSamples { needed: usize, available: usize },

    #[error("degenerate sample after {0} attempts")]
    DegenerateSample(usize),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("unknown annotation kind `{0}`")]
    UnknownKind(String),

    #[error("corrupt file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig { key: key.into(), reason: reason.into() }
    }
}
