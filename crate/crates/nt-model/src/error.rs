use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("tensor error: {0}")]
    Tensor(#[from] nt_core::TensorError),
    #[error("{op}: {message}")]
    Contract { op: &'static str, message: String },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub fn contract(op: &'static str, message: impl Into<String>) -> ModelError {
    ModelError::Contract { op, message: message.into() }
}
