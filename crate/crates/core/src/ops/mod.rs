//! Non-novel neural operators with explicit forward and backward passes.

pub mod activation;
pub mod batchnorm;
pub mod channel;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu_bwd, relu_fwd};
pub use batchnorm::{batchnorm_bwd, batchnorm_fwd, BatchNormState, BnCache, BnMode};
pub use channel::{
    channel_transform_bwd, channel_transform_fwd, strided_len, subsample, subsample_bwd, ChannelTransform,
    ChannelTransformGrads,
};
pub use conv::{conv2d_bwd, conv2d_fwd, Conv2d};
pub use linear::{fc_bwd, fc_fwd, FullyConnected};
pub use loss::{argmax_rows, softmax_xent_bwd, softmax_xent_fwd};
pub use pool::{global_avgpool_bwd, global_avgpool_fwd, maxpool3x3s2_bwd, maxpool3x3s2_fwd, maxpool_out_len};
