use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ItlError>;

#[derive(Debug, Error)]
pub enum ItlError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("missing slice file {path} (case {case_id}, slice {slice_index})")]
    MissingSlice {
        path: PathBuf,
        case_id: String,
        slice_index: usize,
    },

    #[error("non-binary mask in case {case_id}, slice {slice_index}: found value {value}")]
    NonBinaryMask {
        case_id: String,
        slice_index: usize,
        value: u32,
    },

    #[error("shape mismatch in case {case_id}, slice {slice_index}: {detail}")]
    SliceShape {
        case_id: String,
        slice_index: usize,
        detail: String,
    },

    #[error("unreadable image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("site {0} is already stored in memory")]
    DuplicateSite(String),

    #[error("source decoder is required but absent (phase {phase})")]
    MissingSourceDecoder { phase: usize },

    #[error("weights file {path}: {reason}")]
    Weights { path: PathBuf, reason: String },

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl ItlError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ItlError::Io {
            path: path.into(),
            source,
        }
    }
}
