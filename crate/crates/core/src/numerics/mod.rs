//! Dense tensors, reverse-mode gradients, optimization and gradient checks.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use optim::{clip_grad_norm, Adam};
pub use params::{uniform, uniform_fan_in, Gradients, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;
