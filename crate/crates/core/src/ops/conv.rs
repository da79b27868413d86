//! Direct-loop k×k convolution (odd k, padding ⌊k/2⌋) for the ResNet baselines.

use rand::Rng;
use rayon::prelude::*;

use super::channel::strided_len;
use crate::error::{shape_err, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Weight `(out, in, k, k)`, no bias (always followed by batch norm).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub weight: Tensor<T>,
    pub stride: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn init_he<R: Rng + ?Sized>(out_c: usize, in_c: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        Self { weight: Tensor::randn(Shape::new(out_c, in_c, k, k), std, rng), stride }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn out_shape(&self, x: Shape) -> Shape {
        Shape::new(x.n, self.weight.shape().n, strided_len(x.h, self.stride), strided_len(x.w, self.stride))
    }
}

/// Valid output range `[lo, hi)` for tap offset `d` (already shifted by −pad).
#[inline]
fn tap_range(d: isize, stride: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if d >= 0 { 0 } else { ((-d) + s - 1) / s };
    let hi = ((in_len as isize - 1 - d).div_euclid(s) + 1).clamp(0, out_len as isize);
    (lo.min(hi.max(0)) as usize, hi.max(0) as usize)
}

pub fn conv2d_fwd<T: Element>(x: &Tensor<T>, conv: &Conv2d<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let ws = conv.weight.shape();
    if ws.c != xs.c {
        return shape_err(format!("conv expects {} input channels, got {xs}", ws.c));
    }
    let k = ws.h;
    let pad = (k / 2) as isize;
    let s = conv.stride;
    let os = conv.out_shape(xs);
    let mut y = Tensor::zeros(os);
    if os.numel() == 0 {
        return Ok(y);
    }
    let w = conv.weight.data();
    y.data_mut().par_chunks_mut(os.sample()).enumerate().for_each(|(n, ys)| {
        let xn = x.sample(n);
        for o in 0..os.c {
            let yo = &mut ys[o * os.plane()..(o + 1) * os.plane()];
            for i in 0..xs.c {
                let xi = &xn[i * xs.plane()..(i + 1) * xs.plane()];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (h0, h1) = tap_range(dy, s, xs.h, os.h);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (w0, w1) = tap_range(dx, s, xs.w, os.w);
                        let wv = w[((o * xs.c + i) * k + ky) * k + kx];
                        for oh in h0..h1 {
                            let ih = (oh * s) as isize + dy;
                            let xrow = &xi[ih as usize * xs.w..];
                            let yrow = &mut yo[oh * os.w..(oh + 1) * os.w];
                            for ow in w0..w1 {
                                let iw = ((ow * s) as isize + dx) as usize;
                                yrow[ow] = yrow[ow] + wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(y)
}

/// Returns `(grad_x, grad_weight)`.
pub fn conv2d_bwd<T: Element>(
    x: &Tensor<T>,
    conv: &Conv2d<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let xs = x.shape();
    let ws = conv.weight.shape();
    let os = conv.out_shape(xs);
    if grad_out.shape() != os || ws.c != xs.c {
        return shape_err(format!("conv grad {} vs output {os}", grad_out.shape()));
    }
    let k = ws.h;
    let pad = (k / 2) as isize;
    let s = conv.stride;
    let w = conv.weight.data();

    let mut grad_x = Tensor::zeros(xs);
    if xs.numel() > 0 {
        grad_x.data_mut().par_chunks_mut(xs.sample()).enumerate().for_each(|(n, gx)| {
            let gn = grad_out.sample(n);
            for o in 0..os.c {
                let go = &gn[o * os.plane()..(o + 1) * os.plane()];
                for i in 0..xs.c {
                    let gxi = &mut gx[i * xs.plane()..(i + 1) * xs.plane()];
                    for ky in 0..k {
                        let dy = ky as isize - pad;
                        let (h0, h1) = tap_range(dy, s, xs.h, os.h);
                        for kx in 0..k {
                            let dx = kx as isize - pad;
                            let (w0, w1) = tap_range(dx, s, xs.w, os.w);
                            let wv = w[((o * xs.c + i) * k + ky) * k + kx];
                            for oh in h0..h1 {
                                let ih = ((oh * s) as isize + dy) as usize;
                                for ow in w0..w1 {
                                    let iw = ((ow * s) as isize + dx) as usize;
                                    gxi[ih * xs.w + iw] = gxi[ih * xs.w + iw] + wv * go[oh * os.w + ow];
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    let mut grad_w = Tensor::zeros(ws);
    for n in 0..xs.n {
        let xn = x.sample(n);
        let gn = grad_out.sample(n);
        for o in 0..os.c {
            let go = &gn[o * os.plane()..(o + 1) * os.plane()];
            for i in 0..xs.c {
                let xi = &xn[i * xs.plane()..(i + 1) * xs.plane()];
                for ky in 0..k {
                    let dy = ky as isize - pad;
                    let (h0, h1) = tap_range(dy, s, xs.h, os.h);
                    for kx in 0..k {
                        let dx = kx as isize - pad;
                        let (w0, w1) = tap_range(dx, s, xs.w, os.w);
                        let mut acc = T::zero();
                        for oh in h0..h1 {
                            let ih = ((oh * s) as isize + dy) as usize;
                            for ow in w0..w1 {
                                let iw = ((ow * s) as isize + dx) as usize;
                                acc = acc + xi[ih * xs.w + iw] * go[oh * os.w + ow];
                            }
                        }
                        let idx = ((o * xs.c + i) * k + ky) * k + kx;
                        grad_w.data_mut()[idx] = grad_w.data()[idx] + acc;
                    }
                }
            }
        }
    }
    Ok((grad_x, grad_w))
}
