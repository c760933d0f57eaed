//! Minimal deterministic N-dimensional tensor library with a define-by-run
//! reverse-mode autodiff graph.

mod array;
mod error;
mod graph;
pub(crate) mod kernels;

pub use array::Tensor;
pub use error::TensorError;
pub use graph::{Graph, OpKind, Var};

/// Layer-norm epsilon used throughout the models.
pub const LAYER_NORM_EPS: f64 = 1e-5;
