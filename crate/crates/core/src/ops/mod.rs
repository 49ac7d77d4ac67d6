//! Numeric kernels on [`Tensor`](crate::tensor::Tensor) values. Every
//! function here is pure.

pub mod conv;
pub mod elementwise;
pub mod pool;

pub use conv::{
    conv2d, conv2d_backward, conv2d_oracle, conv2d_oracle_with, conv2d_with, Padding,
    WindowGeometry,
};
pub use elementwise::{
    add, concat_channels, elu, relu, softmax, softmax_rows, Activation, ELU_ALPHA,
};
pub use pool::{
    avg_pool, global_avg_pool, max_pool, max_pool_with_argmax, TRANSITION_POOL_STRIDE,
    TRANSITION_POOL_WINDOW,
};
