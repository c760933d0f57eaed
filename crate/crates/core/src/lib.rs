//! Physics-constrained 2× downscaling of gridded geophysical fields.
//!
//! The numeric core (tensors, models, losses, optimiser, metrics) is generic
//! over [`Real`]; the aliases below fix the scalar for the common cases.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod evaluation;
pub mod fields;
pub mod gradcheck;
pub mod models;
pub mod rng;
mod scalar;
pub mod tensor;
pub mod training;

pub use scalar::Real;

pub type Tensor = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph = tensor::Graph<f64>;
pub type Model = models::Model<f64>;
pub type Model32 = models::Model<f32>;
