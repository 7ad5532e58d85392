use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AwbError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AwbError {
    #[error("{op}: shape mismatch, {detail} (shapes: {shapes:?})")]
    ShapeMismatch {
        op: &'static str,
        detail: String,
        shapes: Vec<Vec<usize>>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("input too small for {op}: {height}x{width}, need at least {min}x{min}")]
    InputTooSmall {
        op: &'static str,
        height: usize,
        width: usize,
        min: usize,
    },

    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },

    #[error("{path}: missing required column `{column}`")]
    MissingColumn { path: String, column: String },

    #[error("{path}: duplicate image_id `{id}` at line {line}")]
    DuplicateId { path: String, id: String, line: u64 },

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl AwbError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>, shapes: &[&[usize]]) -> Self {
        AwbError::ShapeMismatch {
            op,
            detail: detail.into(),
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        AwbError::Domain {
            op,
            detail: detail.into(),
        }
    }
}
