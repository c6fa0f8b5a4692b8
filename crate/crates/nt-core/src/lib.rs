//! Dense tensor numerics for the tuning stack: row-major tensors, a
//! per-pass reverse-mode tape, deterministic named RNG streams, Adam, and
//! finite-difference gradient checking.
//!
//! With the default `parallel` feature the matmul kernels split output rows
//! over rayon; the sequential fallback computes identical bits because both
//! paths accumulate each output element in the same order.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod ser;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, DEFAULT_EPSILON, DEFAULT_TOLERANCE};
pub use graph::{argmax, Graph, Gradients, NodeId};
pub use scalar::Scalar;
pub use tensor::{topk_rows, Tensor};
