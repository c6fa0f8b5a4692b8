//! Training and evaluation harness: run configuration, dataset assembly
//! into token sequences, the joint tuning loop over the frozen backbone,
//! greedy evaluation with task metrics and activation statistics, and the
//! checkpoint/artifact formats that tie the stages together.

pub mod artifacts;
pub mod assemble;
pub mod ckpt;
pub mod config;
pub mod error;
pub mod evalrun;
pub mod metrics;
pub mod pipeline;
pub mod tune;

pub use error::{Result, TrainError};
