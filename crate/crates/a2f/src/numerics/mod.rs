//! Differentiation substrate: dense tensors, layer primitives, reverse-mode
//! gradients, finite-difference checking and the Adam optimizer.
//!
//! Training runs in single precision; gradient checks instantiate the same
//! graph code at double precision so finite-difference noise stays below the
//! comparison tolerance.

mod adam;
mod fd;
pub mod gradcheck;
mod graph;
mod real;
mod rng;
mod tensor;

pub use adam::{AdamConfig, AdamSlot, AdamState};
pub use fd::{finite_difference_grad, max_relative_error, relative_error};
pub use graph::{interp_positions, Graph, Padding, Var};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by graph construction, backward passes and optimizer steps.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{layer}: shape mismatch: {detail}")]
    ShapeMismatch { layer: &'static str, detail: String },
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGrad(String),
    #[error("{0}")]
    Invalid(String),
}

impl NumericsError {
    pub(crate) fn shape(layer: &'static str, detail: impl Into<String>) -> Self {
        NumericsError::ShapeMismatch { layer, detail: detail.into() }
    }
}
