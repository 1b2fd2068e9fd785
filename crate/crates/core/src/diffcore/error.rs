use thiserror::Error;

/// Errors raised by the differentiable array engine and its optimizer.
#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch in `{op}`: {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward already ran on this tape; reset it before recording again")]
    BackwardTwice,
    #[error("trainable parameter `{name}` has no gradient")]
    MissingGrad { name: String },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DiffError>;
