//! Robustness-aware compression of a small transformer classifier.

pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
