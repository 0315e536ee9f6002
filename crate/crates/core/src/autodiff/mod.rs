//! Minimal differentiable dense-array engine.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport, ROUNDING_ULPS};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{CustomOp, Gradients, Tape, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;
