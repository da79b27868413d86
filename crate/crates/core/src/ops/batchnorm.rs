//! Batch normalization over `(N, H, W)` per channel.
//!
//! Training-mode statistics use a two-pass (mean, then centered variance)
//! reduction in fixed channel/sample order.

use crate::error::{shape_err, Error, Result};
use crate::tensor::{debug_check_finite, Element, Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight kept on the old running statistic at each update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub epsilon: T,
}

#[derive(Clone, Debug)]
pub struct BnCache<T> {
    mode: BnMode,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

impl<T: Element> BatchNormState<T> {
    pub fn is_finite(&self) -> bool {
        [&self.gamma, &self.beta, &self.running_mean, &self.running_var].iter().all(|t| t.is_finite())
    }

    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        Self {
            gamma: Tensor::filled(s, T::one()),
            beta: Tensor::zeros(s),
            running_mean: Tensor::zeros(s),
            running_var: Tensor::filled(s, T::one()),
            momentum: T::lit(BN_MOMENTUM),
            epsilon: T::lit(BN_EPSILON),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Folds the batch statistics of a training-mode forward into the running averages.
    pub fn update_running(&mut self, cache: &BnCache<T>, count: usize) {
        if cache.mode != BnMode::Train {
            return;
        }
        let mu = self.momentum;
        let unbias = if count > 1 { T::lit(count as f64 / (count - 1) as f64) } else { T::one() };
        for c in 0..self.channels() {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = mu * *rm + (T::one() - mu) * cache.batch_mean[c];
            let rv = &mut self.running_var.data_mut()[c];
            *rv = mu * *rv + (T::one() - mu) * cache.batch_var[c] * unbias;
        }
    }
}

pub fn batchnorm_fwd<T: Element>(
    x: &Tensor<T>,
    state: &BatchNormState<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let xs = x.shape();
    let ch = state.channels();
    if xs.c != ch {
        return shape_err(format!("batchnorm over {ch} channels got input {xs}"));
    }
    if mode == BnMode::Train && xs.n < 2 {
        return Err(Error::Unsupported(
            "batch normalization in training mode needs a batch of at least 2".into(),
        ));
    }
    let plane = xs.plane();
    let count = xs.n * plane;
    let mut mean = vec![T::zero(); ch];
    let mut var = vec![T::zero(); ch];
    let mut inv_std = vec![T::zero(); ch];
    for c in 0..ch {
        let (m, v) = match mode {
            BnMode::Train => {
                let inv_count = T::lit(1.0 / count as f64);
                let mut s = T::zero();
                for n in 0..xs.n {
                    s = s + x.plane(n, c).iter().copied().sum::<T>();
                }
                let m = s * inv_count;
                let mut sq = T::zero();
                for n in 0..xs.n {
                    sq = sq + x.plane(n, c).iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                }
                (m, sq * inv_count)
            }
            BnMode::Eval => (state.running_mean.data()[c], state.running_var.data()[c]),
        };
        mean[c] = m;
        var[c] = v;
        inv_std[c] = T::one() / (v + state.epsilon).sqrt();
    }

    let mut xhat = Tensor::zeros(xs);
    let mut y = Tensor::zeros(xs);
    for n in 0..xs.n {
        for c in 0..ch {
            let (g, b) = (state.gamma.data()[c], state.beta.data()[c]);
            let off = (n * ch + c) * plane;
            for i in off..off + plane {
                let h = (x.data()[i] - mean[c]) * inv_std[c];
                xhat.data_mut()[i] = h;
                y.data_mut()[i] = g * h + b;
            }
        }
    }
    debug_check_finite(&y, || x.is_finite() && state.is_finite(), "batchnorm_fwd");
    Ok((y, BnCache { mode, xhat, inv_std, batch_mean: mean, batch_var: var }))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_bwd<T: Element>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
    state: &BatchNormState<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let xs = cache.xhat.shape();
    if grad_out.shape() != xs {
        return shape_err(format!("batchnorm grad {} vs forward {}", grad_out.shape(), xs));
    }
    let ch = xs.c;
    let plane = xs.plane();
    let count = T::lit((xs.n * plane) as f64);
    let mut grad_gamma = Tensor::zeros(state.gamma.shape());
    let mut grad_beta = Tensor::zeros(state.beta.shape());
    let mut grad_x = Tensor::zeros(xs);
    for c in 0..ch {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..xs.n {
            let off = (n * ch + c) * plane;
            for i in off..off + plane {
                let dy = grad_out.data()[i];
                sum_dy = sum_dy + dy;
                sum_dy_xhat = sum_dy_xhat + dy * cache.xhat.data()[i];
            }
        }
        grad_gamma.data_mut()[c] = sum_dy_xhat;
        grad_beta.data_mut()[c] = sum_dy;
        let g = state.gamma.data()[c];
        let is = cache.inv_std[c];
        for n in 0..xs.n {
            let off = (n * ch + c) * plane;
            for i in off..off + plane {
                let dy = grad_out.data()[i];
                grad_x.data_mut()[i] = match cache.mode {
                    BnMode::Train => {
                        g * is / count * (count * dy - sum_dy - cache.xhat.data()[i] * sum_dy_xhat)
                    }
                    BnMode::Eval => g * is * dy,
                };
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(Shape::new(4, 3, 5, 5), 3.0, &mut rng).map(|v| v + 2.0);
        let st = BatchNormState::new(3);
        let (y, _) = batchnorm_fwd(&x, &st, BnMode::Train).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|n| y.plane(n, c).to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn single_sample_training_is_unsupported() {
        let x = Tensor::<f32>::zeros(Shape::new(1, 2, 3, 3));
        let st = BatchNormState::new(2);
        assert!(matches!(batchnorm_fwd(&x, &st, BnMode::Train), Err(Error::Unsupported(_))));
        assert!(batchnorm_fwd(&x, &st, BnMode::Eval).is_ok());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_fn(Shape::new(2, 1, 1, 2), |n, _, _, w| (n * 2 + w) as f64);
        let mut st = BatchNormState::new(1);
        let (_, cache) = batchnorm_fwd(&x, &st, BnMode::Train).unwrap();
        st.update_running(&cache, 4);
        // batch mean 1.5, biased var 1.25, unbiased 5/3
        assert!((st.running_mean.data()[0] - 0.15).abs() < 1e-12);
        assert!((st.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        assert!(st.running_var.data()[0] > 0.0);
    }
}
