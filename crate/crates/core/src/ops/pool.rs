//! 3×3/stride-2 max pooling (padding 1) and global average pooling.

use crate::error::{shape_err, Result};
use crate::tensor::{Element, Shape, Tensor};

pub fn maxpool_out_len(len: usize) -> usize {
    (len + 2 - 3) / 2 + 1
}

/// Returns the pooled map and, per output element, the flat input index of its maximum.
pub fn maxpool3x3s2_fwd<T: Element>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let xs = x.shape();
    let os = Shape::new(xs.n, xs.c, maxpool_out_len(xs.h), maxpool_out_len(xs.w));
    let mut y = Tensor::zeros(os);
    let mut argmax = vec![0usize; os.numel()];
    let mut o = 0;
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oh in 0..os.h {
                for ow in 0..os.w {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0;
                    for dy in 0..3 {
                        let ih = (oh * 2 + dy) as isize - 1;
                        if ih < 0 || ih >= xs.h as isize {
                            continue;
                        }
                        for dx in 0..3 {
                            let iw = (ow * 2 + dx) as isize - 1;
                            if iw < 0 || iw >= xs.w as isize {
                                continue;
                            }
                            let i = xs.offset(n, c, ih as usize, iw as usize);
                            if x.data()[i] > best {
                                best = x.data()[i];
                                best_i = i;
                            }
                        }
                    }
                    y.data_mut()[o] = best;
                    argmax[o] = best_i;
                    o += 1;
                }
            }
        }
    }
    (y, argmax)
}

pub fn maxpool3x3s2_bwd<T: Element>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: Shape,
) -> Result<Tensor<T>> {
    if grad_out.numel() != argmax.len() {
        return shape_err("maxpool grad does not match forward output");
    }
    let mut gx = Tensor::zeros(input_shape);
    for (&g, &i) in grad_out.data().iter().zip(argmax) {
        gx.data_mut()[i] = gx.data()[i] + g;
    }
    Ok(gx)
}

pub fn global_avgpool_fwd<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let xs = x.shape();
    let inv = T::lit(1.0 / xs.plane().max(1) as f64);
    Tensor::from_fn(Shape::new(xs.n, xs.c, 1, 1), |n, c, _, _| {
        x.plane(n, c).iter().copied().sum::<T>() * inv
    })
}

pub fn global_avgpool_bwd<T: Element>(grad_out: &Tensor<T>, input_shape: Shape) -> Result<Tensor<T>> {
    let gs = grad_out.shape();
    if gs != Shape::new(input_shape.n, input_shape.c, 1, 1) {
        return shape_err(format!("avgpool grad {gs} for input {input_shape}"));
    }
    let inv = T::lit(1.0 / input_shape.plane().max(1) as f64);
    Ok(Tensor::from_fn(input_shape, |n, c, _, _| grad_out.at(n, c, 0, 0) * inv))
}
