use thiserror::Error;

#[derive(Debug, Error)]
pub enum PifError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("tape: {0}")]
    Tape(String),

    #[error("non-finite value at component {index}")]
    NonFinite { index: usize },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PifError>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> PifError {
    PifError::InvalidArgument { op, msg: msg.into() }
}

pub(crate) fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> PifError {
    PifError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
