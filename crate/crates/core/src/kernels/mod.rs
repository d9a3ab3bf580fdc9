//! Deterministic forward kernels and their analytic adjoints.
//!
//! Every kernel is a pure function of its arguments. Reductions run in a
//! fixed order, so identical inputs give bit-identical outputs.

mod conv;
mod elementwise;
mod linear;
mod loss;
mod norm;

pub use conv::{
    channel_scale_backward, channel_scale_forward, conv1x1_backward, conv1x1_forward,
    conv3x3_backward, conv3x3_forward, depthwise3x3_backward, depthwise3x3_forward, strided_dim,
    ConvGrads,
};
pub use elementwise::{
    add, concat_channels, concat_channels_backward, global_avgpool, global_avgpool_backward,
    relu6, relu6_backward,
};
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub use loss::{argmax_rows, cross_entropy_loss, mse_loss};
pub use norm::{
    batchnorm_backward, batchnorm_forward, update_running_stats, BatchNormParams, BnCache,
    BnGrads, BnMode, BN_EPSILON, BN_MOMENTUM,
};
