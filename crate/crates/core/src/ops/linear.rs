//! Fully-connected classifier head on `(N, C, 1, 1)` features.
//!
//! Same arithmetic as a channel transform applied to a 1×1 map.

use super::channel::{channel_transform_bwd, channel_transform_fwd, ChannelTransform, ChannelTransformGrads};
use crate::error::{shape_err, Result};
use crate::tensor::{Element, Tensor};

pub type FullyConnected<T = f32> = ChannelTransform<T>;

pub fn fc_fwd<T: Element>(x: &Tensor<T>, fc: &FullyConnected<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.h != 1 || s.w != 1 {
        return shape_err(format!("fc expects pooled (N,C,1,1) input, got {s}"));
    }
    channel_transform_fwd(x, fc)
}

pub fn fc_bwd<T: Element>(
    x: &Tensor<T>,
    fc: &FullyConnected<T>,
    grad_out: &Tensor<T>,
) -> Result<ChannelTransformGrads<T>> {
    channel_transform_bwd(x, fc, grad_out)
}
