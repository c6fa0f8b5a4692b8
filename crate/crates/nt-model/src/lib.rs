//! Model stack: a small frozen decoder-only backbone, the sparse task
//! network that steers it, task heads for masks and image-feature
//! regression, and a discrete codebook synthesis path.

pub mod backbone;
pub mod checks;
pub mod error;
pub mod heads;
pub mod sparse;
pub mod synth;
pub mod token;

pub use error::{ModelError, Result};
