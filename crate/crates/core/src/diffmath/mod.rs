//! Reverse-mode differentiation over tensor-valued nodes.
//!
//! A [`Graph`] records every operation eagerly, so each [`Var`] already holds
//! its value. [`Graph::backward`] then sweeps the trace in reverse from a
//! scalar root and returns exact gradients for every recorded value.
//!
//! Elementwise operations accept operands of equal shape, or one operand with
//! a single element that is broadcast. Subgradient conventions: `|x|` at zero
//! has derivative zero, ties in `max`/`min` route the gradient to the first
//! operand, and `clamp` passes the gradient through on the closed interval.

mod check;
mod graph;
mod tensor;

pub use check::{central_difference, finite_diff_check};
pub use graph::{trilinear_corners, ConvGeom, Corner, Gradients, Graph, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op} is undefined at {value}")]
    Domain { op: &'static str, value: f64 },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("variable does not belong to this recording")]
    ForeignVar,
}
