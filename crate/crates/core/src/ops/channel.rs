//! Channel transformation (1×1 per-pixel linear map) and anchor subsampling.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::{debug_check_finite, gemm, Element, MatLayout, Shape, Tensor};

/// `y[n,o,h,w] = Σ_c weight[o,c]·x[n,c,h,w] + bias[o]`.
///
/// `weight` is stored as `(out, in, 1, 1)`, `bias` as `(1, out, 1, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelTransform<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ChannelTransformGrads<T = f32> {
    pub grad_x: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Option<Tensor<T>>,
}

impl<T: Element> ChannelTransform<T> {
    pub fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.as_ref().is_none_or(|b| b.is_finite())
    }

    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let ws = weight.shape();
        if ws.h != 1 || ws.w != 1 {
            return shape_err(format!("channel transform weight must be (out,in,1,1), got {ws}"));
        }
        if let Some(b) = &bias {
            if b.shape() != Shape::new(1, ws.n, 1, 1) {
                return shape_err(format!("bias shape {} for {} outputs", b.shape(), ws.n));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, with_bias: bool) -> Self {
        Self {
            weight: Tensor::zeros(Shape::new(out_channels, in_channels, 1, 1)),
            bias: with_bias.then(|| Tensor::zeros(Shape::new(1, out_channels, 1, 1))),
        }
    }

    /// Row-major matrix constructor, mostly for tests.
    pub fn from_rows(out_channels: usize, in_channels: usize, rows: Vec<T>, bias: Option<Vec<T>>) -> Result<Self> {
        let weight = Tensor::from_vec(Shape::new(out_channels, in_channels, 1, 1), rows)?;
        let bias = bias
            .map(|b| Tensor::from_vec(Shape::new(1, out_channels, 1, 1), b))
            .transpose()?;
        Self::new(weight, bias)
    }

    /// Gaussian weights with `std = gain / sqrt(in_channels)`; bias zero.
    pub fn init_gaussian<R: Rng + ?Sized>(
        out_channels: usize,
        in_channels: usize,
        with_bias: bool,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let std = gain / (in_channels.max(1) as f64).sqrt();
        Self {
            weight: Tensor::randn(Shape::new(out_channels, in_channels, 1, 1), std, rng),
            bias: with_bias.then(|| Tensor::zeros(Shape::new(1, out_channels, 1, 1))),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn num_params(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }
}

pub fn channel_transform_fwd<T: Element>(x: &Tensor<T>, ct: &ChannelTransform<T>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let (cin, cout) = (ct.in_channels(), ct.out_channels());
    if xs.c != cin {
        return shape_err(format!("channel transform expects {cin} input channels, got {xs}"));
    }
    let plane = xs.plane();
    let out_shape = Shape::new(xs.n, cout, xs.h, xs.w);
    let mut y = Tensor::zeros(out_shape);
    if out_shape.numel() == 0 {
        return Ok(y);
    }
    let w = ct.weight.data();
    let bias = ct.bias.as_ref().map(|b| b.data());
    y.data_mut()
        .par_chunks_mut(out_shape.sample())
        .zip(x.data().par_chunks(xs.sample().max(1)))
        .for_each(|(ys, xs_n)| {
            gemm(
                T::one(),
                w,
                MatLayout::row_major(cout, cin),
                xs_n,
                MatLayout::row_major(cin, plane),
                T::zero(),
                ys,
                MatLayout::row_major(cout, plane),
            );
            if let Some(b) = bias {
                for (o, row) in ys.chunks_mut(plane).enumerate() {
                    row.iter_mut().for_each(|v| *v = *v + b[o]);
                }
            }
        });
    debug_check_finite(&y, || x.is_finite() && ct.is_finite(), "channel_transform_fwd");
    Ok(y)
}

pub fn channel_transform_bwd<T: Element>(
    x: &Tensor<T>,
    ct: &ChannelTransform<T>,
    grad_out: &Tensor<T>,
) -> Result<ChannelTransformGrads<T>> {
    let xs = x.shape();
    let (cin, cout) = (ct.in_channels(), ct.out_channels());
    if xs.c != cin {
        return shape_err(format!("channel transform expects {cin} input channels, got {xs}"));
    }
    let expect = Shape::new(xs.n, cout, xs.h, xs.w);
    if grad_out.shape() != expect {
        return shape_err(format!("grad_out {} does not match forward output {expect}", grad_out.shape()));
    }
    let plane = xs.plane();
    let w = ct.weight.data();

    let mut grad_x = Tensor::zeros(xs);
    if xs.numel() > 0 {
        grad_x
            .data_mut()
            .par_chunks_mut(xs.sample())
            .zip(grad_out.data().par_chunks(expect.sample().max(1)))
            .for_each(|(gx, g)| {
                gemm(
                    T::one(),
                    w,
                    MatLayout::transposed(cout, cin),
                    g,
                    MatLayout::row_major(cout, plane),
                    T::zero(),
                    gx,
                    MatLayout::row_major(cin, plane),
                );
            });
    }

    // Fixed n order keeps the reduction independent of worker count.
    let mut grad_weight = Tensor::zeros(ct.weight.shape());
    for n in 0..xs.n {
        gemm(
            T::one(),
            grad_out.sample(n),
            MatLayout::row_major(cout, plane),
            x.sample(n),
            MatLayout::transposed(cin, plane),
            T::one(),
            grad_weight.data_mut(),
            MatLayout::row_major(cout, cin),
        );
    }

    let grad_bias = ct.bias.as_ref().map(|b| {
        let mut gb = Tensor::zeros(b.shape());
        for n in 0..xs.n {
            for (o, row) in grad_out.sample(n).chunks(plane.max(1)).enumerate() {
                let s: T = row.iter().copied().sum();
                gb.data_mut()[o] = gb.data()[o] + s;
            }
        }
        gb
    });

    Ok(ChannelTransformGrads { grad_x, grad_weight, grad_bias })
}

/// Output extent for stride `s` with anchors at `s·i`: `⌈len/s⌉`.
pub fn strided_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Picks `x[.., s·h', s·w']`.
pub fn subsample<T: Element>(x: &Tensor<T>, stride: usize) -> Tensor<T> {
    if stride == 1 {
        return x.clone();
    }
    let xs = x.shape();
    let os = Shape::new(xs.n, xs.c, strided_len(xs.h, stride), strided_len(xs.w, stride));
    Tensor::from_fn(os, |n, c, h, w| x.at(n, c, h * stride, w * stride))
}

/// Adjoint of [`subsample`]: scatters into a zero map of `input_shape`.
pub fn subsample_bwd<T: Element>(grad: &Tensor<T>, input_shape: Shape, stride: usize) -> Tensor<T> {
    if stride == 1 {
        return grad.clone();
    }
    let gs = grad.shape();
    let mut out = Tensor::zeros(input_shape);
    for n in 0..gs.n {
        for c in 0..gs.c {
            for h in 0..gs.h {
                for w in 0..gs.w {
                    *out.at_mut(n, c, h * stride, w * stride) = grad.at(n, c, h, w);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weight_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(Shape::new(2, 3, 4, 5), 1.0, &mut rng);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let ct = ChannelTransform::from_rows(3, 3, eye, Some(vec![0.0; 3])).unwrap();
        assert_eq!(channel_transform_fwd(&x, &ct).unwrap(), x);
    }

    #[test]
    fn ones_sum_over_channels() {
        let x = Tensor::<f32>::filled(Shape::new(1, 3, 2, 2), 1.0);
        let ct = ChannelTransform::from_rows(1, 3, vec![1.0; 3], Some(vec![0.0])).unwrap();
        let y = channel_transform_fwd(&x, &ct).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f32>::randn(Shape::new(1, 4, 3, 3), 1.0, &mut rng);
        let ct = ChannelTransform::<f32>::init_gaussian(2, 4, true, 1.0, &mut rng);
        let mut ct = ct;
        ct.bias = Some(Tensor::randn(Shape::new(1, 2, 1, 1), 1.0, &mut rng));
        let y = channel_transform_fwd(&x, &ct).unwrap();
        for o in 0..2 {
            for h in 0..3 {
                for w in 0..3 {
                    let mut acc = ct.bias.as_ref().unwrap().data()[o];
                    for c in 0..4 {
                        acc += ct.weight.data()[o * 4 + c] * x.at(0, c, h, w);
                    }
                    assert!((y.at(0, o, h, w) - acc).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 2, 2));
        let ct = ChannelTransform::<f32>::zeros(4, 3, false);
        assert!(channel_transform_fwd(&x, &ct).is_err());
        let g = Tensor::zeros(Shape::new(1, 4, 2, 2));
        assert!(channel_transform_bwd(&x, &ct, &g).is_err());
    }

    #[test]
    fn sum_loss_gradients() {
        // identity weight, loss = sum(y) → grad_x all ones
        let x = Tensor::<f64>::filled(Shape::new(1, 2, 2, 2), 1.0);
        let ct = ChannelTransform::from_rows(2, 2, vec![1.0, 0.0, 0.0, 1.0], None).unwrap();
        let ones = Tensor::filled(Shape::new(1, 2, 2, 2), 1.0);
        let g = channel_transform_bwd(&x, &ct, &ones).unwrap();
        assert!(g.grad_x.data().iter().all(|&v| v == 1.0));

        // weight 1×2 on ones: each weight entry sees H·W = 4 positions
        let ct = ChannelTransform::from_rows(1, 2, vec![0.3, -0.2], None).unwrap();
        let ones = Tensor::filled(Shape::new(1, 1, 2, 2), 1.0);
        let g = channel_transform_bwd(&x, &ct, &ones).unwrap();
        assert_eq!(g.grad_weight.data(), &[4.0, 4.0]);
    }

    #[test]
    fn subsample_roundtrip_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(Shape::new(1, 2, 5, 5), 1.0, &mut rng);
        let s = subsample(&x, 2);
        assert_eq!(s.shape(), Shape::new(1, 2, 3, 3));
        let g = Tensor::<f64>::randn(s.shape(), 1.0, &mut rng);
        let back = subsample_bwd(&g, x.shape(), 2);
        // <S x, g> == <x, S^T g>
        assert!((s.dot(&g) - x.dot(&back)).abs() < 1e-12);
    }
}
