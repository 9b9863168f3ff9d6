//! Multi-choice reading comprehension: a transformer encoder with a
//! multi-step attention head, staged transfer training and experiment
//! harnesses, on top of `mmm-autodiff`.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod grad_suite;
pub mod man;
pub mod model;
pub mod train;

pub use error::{MmmError, Result};
