//! Reference kernel: the weight field materialized explicitly, followed by aggregation,
//! plus the exact backward pass through every path.
//!
//! Output position `p' = (h', w')` anchors at input `(s·h', s·w')`; its window covers the
//! anchor plus offsets in `[−r, r]²`. Neighbors that fall outside the image are masked out
//! of the normalization rather than zero-padded.

use rayon::prelude::*;

use super::composability::{composability, composability_partials};
use super::config::{GeoMode, LocalRelationConfig, Normalization};
use super::params::{LocalRelationGrads, LocalRelationParams};
use super::prior::{prior_backward, prior_or_zero, GeometricPriorTable};
use crate::error::{shape_err, Result};
use crate::ops::{channel_transform_bwd, channel_transform_fwd, subsample, subsample_bwd};
use crate::tensor::{debug_check_finite, Element, Shape, Tensor};

/// Normalized aggregation weights, `N × G × H' × W' × k × k`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightField<T = f32> {
    pub batch: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub weights: Vec<T>,
    /// `H' × W' × k × k`; true where the neighbor lies inside the input.
    pub mask: Vec<bool>,
}

impl<T: Element> WeightField<T> {
    pub fn zeros(batch: usize, groups: usize, out_h: usize, out_w: usize, kernel: usize) -> Self {
        let win = kernel * kernel;
        Self {
            batch,
            groups,
            out_h,
            out_w,
            kernel,
            weights: vec![T::zero(); batch * groups * out_h * out_w * win],
            mask: vec![false; out_h * out_w * win],
        }
    }

    #[inline]
    pub fn window_offset(&self, n: usize, g: usize, h: usize, w: usize) -> usize {
        (((n * self.groups + g) * self.out_h + h) * self.out_w + w) * self.kernel * self.kernel
    }

    pub fn window(&self, n: usize, g: usize, h: usize, w: usize) -> &[T] {
        let o = self.window_offset(n, g, h, w);
        &self.weights[o..o + self.kernel * self.kernel]
    }

    pub fn mask_window(&self, h: usize, w: usize) -> &[bool] {
        let win = self.kernel * self.kernel;
        let o = (h * self.out_w + w) * win;
        &self.mask[o..o + win]
    }

    pub fn valid_count(&self, h: usize, w: usize) -> usize {
        self.mask_window(h, w).iter().filter(|&&m| m).count()
    }
}

/// Everything the backward pass needs from a forward call.
#[derive(Clone, Debug)]
pub struct ForwardCache<T = f32> {
    pub x: Tensor<T>,
    /// Queries at output anchors, `(N, G·d, H', W')`.
    pub q_map: Tensor<T>,
    /// Keys at full resolution, `(N, G·d, H, W)`.
    pub k_map: Tensor<T>,
    pub field: WeightField<T>,
    pub prior: GeometricPriorTable<T>,
    /// Aggregated map before the output transform (only when one is configured).
    pub aggregated: Option<Tensor<T>>,
}

/// Input coordinate of window index `i` around anchor `a`, if it is in bounds.
#[inline]
pub(crate) fn neighbor(anchor: usize, i: usize, radius: usize, len: usize) -> Option<usize> {
    let p = anchor as isize + i as isize - radius as isize;
    (p >= 0 && (p as usize) < len).then_some(p as usize)
}

pub(crate) fn check_input<T: Element>(
    x: &Tensor<T>,
    params: &LocalRelationParams<T>,
    cfg: &LocalRelationConfig,
) -> Result<()> {
    params.validate(cfg)?;
    if x.shape().c != cfg.channels {
        return shape_err(format!("local relation layer expects {} channels, got {}", cfg.channels, x.shape()));
    }
    Ok(())
}

/// Border mask shared by every sample and group.
pub(crate) fn build_mask(h: usize, w: usize, cfg: &LocalRelationConfig) -> Vec<bool> {
    let (k, r, s) = (cfg.kernel, cfg.radius(), cfg.stride);
    let (oh, ow) = (cfg.out_len(h), cfg.out_len(w));
    let mut mask = vec![false; oh * ow * k * k];
    for ph in 0..oh {
        for pw in 0..ow {
            for ky in 0..k {
                for kx in 0..k {
                    mask[((ph * ow + pw) * k + ky) * k + kx] =
                        neighbor(ph * s, ky, r, h).is_some() && neighbor(pw * s, kx, r, w).is_some();
                }
            }
        }
    }
    mask
}

/// Normalizes one window of logits in place over the valid entries.
#[inline]
pub(crate) fn normalize_window<T: Element>(logits: &mut [T], mask: &[bool], norm: Normalization) {
    match norm {
        Normalization::Softmax => {
            let mut m = T::neg_infinity();
            for (l, &v) in logits.iter().zip(mask) {
                if v {
                    m = m.max(*l);
                }
            }
            let mut z = T::zero();
            for (l, &v) in logits.iter_mut().zip(mask) {
                *l = if v { (*l - m).exp() } else { T::zero() };
                z = z + *l;
            }
            let inv = T::one() / z;
            logits.iter_mut().for_each(|l| *l = *l * inv);
        }
        Normalization::None => {
            for (l, &v) in logits.iter_mut().zip(mask) {
                if !v {
                    *l = T::zero();
                }
            }
        }
    }
}

/// Computes `ω(p', p)` for every sample, group, output position and window offset.
///
/// Returns the field together with the anchor queries and full-resolution keys.
pub fn compute_weight_field<T: Element>(
    x: &Tensor<T>,
    params: &LocalRelationParams<T>,
    cfg: &LocalRelationConfig,
) -> Result<(WeightField<T>, Tensor<T>, Tensor<T>)> {
    check_input(x, params, cfg)?;
    let prior = prior_or_zero(params, cfg)?;
    let (field, q_map, k_map) = weight_field_with_prior(x, params, cfg, &prior)?;
    Ok((field, q_map, k_map))
}

fn weight_field_with_prior<T: Element>(
    x: &Tensor<T>,
    params: &LocalRelationParams<T>,
    cfg: &LocalRelationConfig,
    prior: &GeometricPriorTable<T>,
) -> Result<(WeightField<T>, Tensor<T>, Tensor<T>)> {
    let xs = x.shape();
    let (k, r, s, d) = (cfg.kernel, cfg.radius(), cfg.stride, cfg.qk_dim);
    let groups = cfg.groups();
    let (oh, ow) = (cfg.out_len(xs.h), cfg.out_len(xs.w));

    let k_map = channel_transform_fwd(x, &params.theta_k)?;
    let q_map = subsample(&channel_transform_fwd(x, &params.theta_q)?, s);

    let mut field = WeightField::zeros(xs.n, groups, oh, ow, k);
    field.mask = build_mask(xs.h, xs.w, cfg);
    let mut qv = vec![T::zero(); d];
    let mut kv = vec![T::zero(); d];
    for n in 0..xs.n {
        for g in 0..groups {
            for ph in 0..oh {
                for pw in 0..ow {
                    for i in 0..d {
                        qv[i] = q_map.at(n, g * d + i, ph, pw);
                    }
                    let off = field.window_offset(n, g, ph, pw);
                    let mut logits = vec![T::zero(); k * k];
                    for ky in 0..k {
                        let Some(ih) = neighbor(ph * s, ky, r, xs.h) else { continue };
                        for kx in 0..k {
                            let Some(iw) = neighbor(pw * s, kx, r, xs.w) else { continue };
                            for i in 0..d {
                                kv[i] = k_map.at(n, g * d + i, ih, iw);
                            }
                            logits[ky * k + kx] = composability(&qv, &kv, cfg.variant) + prior.get(g, ky, kx);
                        }
                    }
                    let mask = &field.mask[(ph * ow + pw) * k * k..(ph * ow + pw + 1) * k * k];
                    normalize_window(&mut logits, mask, cfg.normalization);
                    field.weights[off..off + k * k].copy_from_slice(&logits);
                }
            }
        }
    }
    Ok((field, q_map, k_map))
}

/// Weighted aggregation of `x` under `field`; channel `c` uses group `⌊c/m⌋`.
pub fn aggregate<T: Element>(x: &Tensor<T>, field: &WeightField<T>, cfg: &LocalRelationConfig) -> Tensor<T> {
    let xs = x.shape();
    let (k, r, s, m) = (cfg.kernel, cfg.radius(), cfg.stride, cfg.channels_per_group);
    let os = Shape::new(xs.n, xs.c, field.out_h, field.out_w);
    let mut y = Tensor::zeros(os);
    for n in 0..xs.n {
        for c in 0..xs.c {
            let g = c / m;
            for ph in 0..os.h {
                for pw in 0..os.w {
                    let wv = field.window(n, g, ph, pw);
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let Some(ih) = neighbor(ph * s, ky, r, xs.h) else { continue };
                        for kx in 0..k {
                            let Some(iw) = neighbor(pw * s, kx, r, xs.w) else { continue };
                            acc = acc + wv[ky * k + kx] * x.at(n, c, ih, iw);
                        }
                    }
                    *y.at_mut(n, c, ph, pw) = acc;
                }
            }
        }
    }
    y
}

/// Reference forward pass; output shape `(N, C_out, ⌈H/s⌉, ⌈W/s⌉)`.
pub fn lr_forward<T: Element>(
    x: &Tensor<T>,
    params: &LocalRelationParams<T>,
    cfg: &LocalRelationConfig,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_input(x, params, cfg)?;
    let prior = prior_or_zero(params, cfg)?;
    let (field, q_map, k_map) = weight_field_with_prior(x, params, cfg, &prior)?;
    let agg = aggregate(x, &field, cfg);
    let (y, aggregated) = match &params.theta_out {
        Some(ct) => (channel_transform_fwd(&agg, ct)?, Some(agg)),
        None => (agg, None),
    };
    debug_check_finite(&y, || x.is_finite() && params.is_finite(), "lr_forward");
    Ok((y, ForwardCache { x: x.clone(), q_map, k_map, field, prior, aggregated }))
}

struct SampleGrads<T> {
    grad_x: Vec<T>,
    grad_q: Vec<T>,
    grad_k: Vec<T>,
    grad_prior: Vec<T>,
}

fn sample_backward<T: Element>(
    n: usize,
    grad_agg: &Tensor<T>,
    cache: &ForwardCache<T>,
    cfg: &LocalRelationConfig,
) -> SampleGrads<T> {
    let x = &cache.x;
    let xs = x.shape();
    let field = &cache.field;
    let (k, r, s, m, d) = (cfg.kernel, cfg.radius(), cfg.stride, cfg.channels_per_group, cfg.qk_dim);
    let win = k * k;
    let groups = cfg.groups();
    let (oh, ow) = (field.out_h, field.out_w);
    let qs = cache.q_map.shape();
    let ks = cache.k_map.shape();

    let mut grad_x = vec![T::zero(); xs.sample()];
    let mut grad_q = vec![T::zero(); qs.sample()];
    let mut grad_k = vec![T::zero(); ks.sample()];
    let mut grad_prior = vec![T::zero(); groups * win];
    let xn = x.sample(n);
    let gn = grad_agg.sample(n);
    let qn = cache.q_map.sample(n);
    let kn = cache.k_map.sample(n);
    let (hw, ohw) = (xs.plane(), oh * ow);

    let mut g_omega = vec![T::zero(); win];
    for g in 0..groups {
        for ph in 0..oh {
            for pw in 0..ow {
                let po = ph * ow + pw;
                let omega = field.window(n, g, ph, pw);
                let mask = field.mask_window(ph, pw);
                g_omega.iter_mut().for_each(|v| *v = T::zero());
                for c in g * m..(g + 1) * m {
                    let gy = gn[c * ohw + po];
                    for ky in 0..k {
                        let Some(ih) = neighbor(ph * s, ky, r, xs.h) else { continue };
                        for kx in 0..k {
                            let Some(iw) = neighbor(pw * s, kx, r, xs.w) else { continue };
                            let xi = c * hw + ih * xs.w + iw;
                            g_omega[ky * k + kx] = g_omega[ky * k + kx] + gy * xn[xi];
                            grad_x[xi] = grad_x[xi] + omega[ky * k + kx] * gy;
                        }
                    }
                }
                // d(loss)/d(logit)
                if cfg.normalization == Normalization::Softmax {
                    let dotp: T = (0..win).filter(|&i| mask[i]).map(|i| omega[i] * g_omega[i]).sum();
                    for i in 0..win {
                        g_omega[i] = if mask[i] { omega[i] * (g_omega[i] - dotp) } else { T::zero() };
                    }
                }
                for ky in 0..k {
                    let Some(ih) = neighbor(ph * s, ky, r, xs.h) else { continue };
                    for kx in 0..k {
                        let Some(iw) = neighbor(pw * s, kx, r, xs.w) else { continue };
                        let gl = g_omega[ky * k + kx];
                        grad_prior[g * win + ky * k + kx] = grad_prior[g * win + ky * k + kx] + gl;
                        for i in 0..d {
                            let qi = (g * d + i) * ohw + po;
                            let ki = (g * d + i) * hw + ih * xs.w + iw;
                            let (dq, dk) = composability_partials(qn[qi], kn[ki], cfg.variant);
                            grad_q[qi] = grad_q[qi] + gl * dq;
                            grad_k[ki] = grad_k[ki] + gl * dk;
                        }
                    }
                }
            }
        }
    }
    SampleGrads { grad_x, grad_q, grad_k, grad_prior }
}

/// Exact gradients with respect to the input and all parameters.
///
/// Per-sample partials are reduced in sample order, so results do not depend on the
/// number of worker threads.
pub fn lr_backward<T: Element>(
    grad_y: &Tensor<T>,
    cache: &ForwardCache<T>,
    params: &LocalRelationParams<T>,
    cfg: &LocalRelationConfig,
) -> Result<LocalRelationGrads<T>> {
    let xs = cache.x.shape();
    let expect = Shape::new(xs.n, cfg.output_channels(), cache.field.out_h, cache.field.out_w);
    if grad_y.shape() != expect {
        return shape_err(format!("grad_y {} does not match forward output {expect}", grad_y.shape()));
    }

    let (grad_agg, theta_out) = match (&params.theta_out, &cache.aggregated) {
        (Some(ct), Some(agg)) => {
            let g = channel_transform_bwd(agg, ct, grad_y)?;
            (g.grad_x, Some(g.grad_weight))
        }
        (None, None) => (grad_y.clone(), None),
        _ => return shape_err("forward cache and parameters disagree on the output transform"),
    };

    let parts: Vec<SampleGrads<T>> =
        (0..xs.n).into_par_iter().map(|n| sample_backward(n, &grad_agg, cache, cfg)).collect();

    let win = cfg.window();
    let mut grad_x = Vec::with_capacity(xs.numel());
    let mut grad_q = Vec::with_capacity(cache.q_map.numel());
    let mut grad_k = Vec::with_capacity(cache.k_map.numel());
    let mut grad_prior = vec![T::zero(); cfg.groups() * win];
    for p in parts {
        grad_x.extend(p.grad_x);
        grad_q.extend(p.grad_q);
        grad_k.extend(p.grad_k);
        for (a, b) in grad_prior.iter_mut().zip(p.grad_prior) {
            *a = *a + b;
        }
    }
    let mut grad_x = Tensor::from_vec(xs, grad_x)?;
    let grad_q = Tensor::from_vec(cache.q_map.shape(), grad_q)?;
    let grad_k = Tensor::from_vec(cache.k_map.shape(), grad_k)?;

    let x_anchor = subsample(&cache.x, cfg.stride);
    let gq = channel_transform_bwd(&x_anchor, &params.theta_q, &grad_q)?;
    grad_x.add_assign(&subsample_bwd(&gq.grad_x, xs, cfg.stride))?;
    let gk = channel_transform_bwd(&cache.x, &params.theta_k, &grad_k)?;
    grad_x.add_assign(&gk.grad_x)?;

    let geo = match cfg.geo_mode {
        GeoMode::Off => super::params::GeoGrads::Off,
        _ => prior_backward(params, cfg, &grad_prior)?,
    };

    Ok(LocalRelationGrads { grad_x, theta_q: gq.grad_weight, theta_k: gk.grad_weight, geo, theta_out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_relation::config::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(variant: Variant, stride: usize) -> LocalRelationConfig {
        LocalRelationConfig {
            channels: 4,
            kernel: 3,
            stride,
            channels_per_group: 2,
            variant,
            geo_hidden: 4,
            ..Default::default()
        }
    }

    #[test]
    fn constant_input_gives_uniform_weights() {
        let cfg = small(Variant::SquaredDifference, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = LocalRelationParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = Tensor::filled(Shape::new(1, 4, 5, 5), 0.7);
        let (field, _, _) = compute_weight_field(&x, &p, &cfg).unwrap();
        for ph in 0..5 {
            for pw in 0..5 {
                let valid = field.valid_count(ph, pw) as f64;
                for (wv, &mk) in field.window(0, 1, ph, pw).iter().zip(field.mask_window(ph, pw)) {
                    let expect = if mk { 1.0 / valid } else { 0.0 };
                    assert!((wv - expect).abs() < 1e-12);
                }
            }
        }
        assert!((field.window(0, 0, 2, 2)[0] - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn k1_is_anchor_subsample() {
        let cfg = LocalRelationConfig { kernel: 1, ..small(Variant::Multiplication, 2) };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LocalRelationParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(2, 4, 5, 6), 1.0, &mut rng);
        let (y, _) = lr_forward(&x, &p, &cfg).unwrap();
        assert_eq!(y, subsample(&x, 2));
    }

    #[test]
    fn grad_shape_mismatch() {
        let cfg = small(Variant::SquaredDifference, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = LocalRelationParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = Tensor::randn(Shape::new(1, 4, 4, 4), 1.0, &mut rng);
        let (_, cache) = lr_forward(&x, &p, &cfg).unwrap();
        let g = Tensor::zeros(Shape::new(1, 4, 3, 3));
        assert!(lr_backward(&g, &cache, &p, &cfg).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let cfg = small(Variant::SquaredDifference, 1);
        let p = LocalRelationParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        assert!(lr_forward(&x, &p, &cfg).is_err());
    }
}
