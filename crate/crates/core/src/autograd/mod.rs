//! Reverse-mode differentiation over the tensor kernels, the classification
//! loss, and the finite-difference oracle used to check both.

mod finite_diff;
mod tape;

pub use finite_diff::{finite_diff, relative_error, relative_error_floored};
pub use tape::{
    cross_entropy, merge_grads, Fault, GradMap, Gradients, NormStats, Tape, Var, LOG_CLAMP,
};
