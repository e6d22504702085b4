//! Text-centered multimodal fusion with multi-task ordinal heads, plus the
//! training, evaluation and nested cross-validation harness around it.

pub mod error;
pub mod blocks;
pub mod catalog;
pub mod cli;
pub mod data;
pub mod eval;
pub mod harness;
pub mod model;
pub mod objective;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
