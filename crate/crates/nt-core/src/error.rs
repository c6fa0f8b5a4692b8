//! Error types shared by every tensor operation.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    /// Two operands disagree on shape. Both shapes are named so the failing
    /// call site can be reconstructed from the message alone.
    #[error("shape mismatch in {op}: left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A contract violation that is not a two-operand shape clash.
    #[error("{op}: expected {expected}, got {got}")]
    Contract {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// An index is out of range for the tensor it addresses.
    #[error("{op}: index {index} out of range for extent {extent}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    /// A forward op produced a non-finite value from finite inputs.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;
