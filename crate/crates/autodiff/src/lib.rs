//! Small reverse-mode automatic differentiation engine.
//!
//! A [`Graph`] records operations on dense tensors during the forward pass;
//! [`Graph::backward`] replays them in reverse. Trainable tensors live in a
//! [`ParamStore`] and are updated by [`Adam`] from accumulated [`Grads`].

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod gru;
pub mod optim;
pub mod params;
pub mod real;
pub mod schedule;
pub mod suite;
pub mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport};
pub use graph::{cross_entropy_value, softmax_slice, Graph, Var};
pub use gru::{gru_cell, GruParams, GruVars};
pub use optim::{clip_global_norm, Adam, OptimizerState};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use real::Real;
pub use schedule::LrSchedule;
pub use tensor::Tensor;
