//! Reverse-mode automatic differentiation on dense `f64` tensors.
//!
//! Gradients are built out of the same recorded primitives as the forward
//! pass, so a gradient taken with `create_graph` can be differentiated again.
//! That is what the unrolled inner steps and the shift-layer ascent need.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{
    analytic_grad, check_grad, check_hvp, eval_scalar, max_relative_error, numeric_grad,
    relative_error, ScalarFn, REL_ERR_FLOOR,
};
pub use params::ParamSet;
pub use tape::{Checkpoint, GradMap, Gradients, Tape, Var, VarMap};
pub use tensor::Tensor;
