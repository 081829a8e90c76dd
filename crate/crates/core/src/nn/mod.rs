//! Layer kernels with hand-written backward passes. Every forward returns
//! its output together with the state the matching backward consumes.

mod batchnorm;
mod conv;
mod layers;
mod loss;
mod pool;

pub use batchnorm::{
    batchnorm2d_backward, batchnorm2d_forward, BnCache, BnGrads, BnMode, RunningStats, BN_EPS,
    BN_MOMENTUM,
};
pub use conv::{
    conv2d_backward, conv2d_backward_params, conv2d_forward, conv_out_extent, ConvCache, ConvGrads,
};
pub use layers::{
    dropout_backward, dropout_forward, global_avg_pool_backward, global_avg_pool_forward,
    linear_backward, linear_forward, relu_backward, relu_forward, softmax, softmax_backward,
    DropoutCache, LinearCache, LinearGrads,
};
pub use loss::cross_entropy;
pub(crate) use loss::{check_targets, log_softmax_row};
pub use pool::{maxpool2d_backward, maxpool2d_forward, PoolCache};

/// Train or eval behaviour of batch norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
