//! Vectorized query-based end-to-end driving model with intra-instance
//! masked self-attention in its perception, prediction and planning
//! decoders, trained on synthetic vectorized scenes.

pub mod autodiff;
pub mod checks;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod query;
pub mod scalar;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
