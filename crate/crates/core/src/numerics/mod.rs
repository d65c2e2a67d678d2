//! Differentiable compute core: tensors, the operation tape, parameter storage,
//! Adam and a finite-difference gradient checker.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, Moments};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use params::{Parameter, ParameterStore};
pub use tape::{AttentionMask, Gradients, Tape, Var, L2_NORM_EPS, LAYER_NORM_EPS};
pub use tensor::Tensor;
