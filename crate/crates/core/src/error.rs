//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid hand template: {0}")]
    InvalidTemplate(String),

    #[error("dataset error in sample '{sample_id}': {message}")]
    Dataset { sample_id: String, message: String },

    #[error("dataset error: {0}")]
    DatasetGlobal(String),

    #[error("sample rejected: {0}")]
    SampleRejected(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite loss at step {step}, micro-step {micro_step} ({source_kind})")]
    NonFiniteLoss {
        step: usize,
        micro_step: usize,
        source_kind: String,
    },

    #[error("array container error: {0}")]
    ArrayFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(context: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            got: got.into(),
        }
    }
}
