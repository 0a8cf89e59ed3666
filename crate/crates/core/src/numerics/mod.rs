//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    finite_diff_grad, grad_check, relative_error, ridders_grad, BlockReport, FiniteDiffMethod, GradCheckOptions,
    GradReport, NumericGrad, DEFAULT_STEP, DEFAULT_TOLERANCE, REL_ERR_FLOOR, RIDDERS_START,
};
pub use layers::{LayerNorm, Linear, Mlp2, Projection};
pub use params::{Grads, ParamId, ParamStore, Parameter};
pub use tape::{Axis, Backward, Fault, Tape, Var, LOG_FLOOR};
pub use tensor::{Precision, Tensor};
