//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Graph`] records operations eagerly onto a tape; [`Graph::backward`]
//! replays it once in reverse. Everything is 64-bit and deterministic:
//! the same inputs and parameters produce bitwise-identical results.

pub mod adam;
pub mod check;
pub mod error;
pub mod graph;
pub mod params;
pub mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use check::{finite_diff_check, finite_diff_check_params, FdReport};
pub use error::{AdError, Result};
pub use graph::{gru_cell, Activation, Graph, GruParams, NodeId};
pub use params::{ParamBinding, ParamStore};
pub use tensor::Tensor;
