//! Stacked sequence surrogates for pore-scale reactive dissolution.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

pub mod autodiff;
pub mod error;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub mod data;
pub mod features;
pub mod io;
pub mod synth;
pub mod models;
pub mod optim;
pub mod stacking;
pub mod rollout;
pub mod metrics;
pub mod bulk;

/// Training precision.
pub type Tensor32 = Tensor<f32>;
/// Solver and gradient-check precision.
pub type Tensor64 = Tensor<f64>;
pub type Network32 = models::Network<f32>;
pub type Network64 = models::Network<f64>;
pub type StateMap64 = data::StateMap<f64>;
pub type Simulation64 = data::Simulation<f64>;
pub type Graph64 = autodiff::Graph<f64>;
