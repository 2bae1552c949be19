//! Minimal dense reverse-mode automatic differentiation.
//!
//! Values are fp64 matrices of rank at most two ([`Tensor`]). A [`Tape`]
//! records a closed set of primitives; [`Tape::backward`] returns the
//! gradient of a scalar with respect to every trainable leaf. Parameters
//! live in a [`ParamStore`] and are bound to a fresh tape per step.

mod error;
pub mod gradcheck;
mod params;
mod sparse;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::grad_check;
pub use params::{BoundParams, ParamId, ParamStore, Parameter};
pub use sparse::{SparseBuilder, SparseMatrix};
pub use tape::{Gradients, Tape, Var, LEAKY_RELU_SLOPE};
pub use tensor::Tensor;
