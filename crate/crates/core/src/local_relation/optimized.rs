//! Fast kernel: per-row weight buffers, group-blocked aggregation, parallel over
//! (sample, group) blocks. Same contract as the reference forward.

use rayon::prelude::*;

use super::composability::{composability, composability1};
use super::config::{LocalRelationConfig, Normalization};
use super::params::LocalRelationParams;
use super::prior::{prior_or_zero, GeometricPriorTable};
use super::reference::{build_mask, check_input, ForwardCache, WeightField};
use crate::error::Result;
use crate::ops::{channel_transform_fwd, subsample};
use crate::tensor::{debug_check_finite, Element, Shape, Tensor};

/// Valid window indices `[lo, hi)` for anchor `a` in an axis of length `len`.
#[inline]
fn valid_range(a: usize, r: usize, k: usize, len: usize) -> (usize, usize) {
    let lo = r.saturating_sub(a);
    let hi = (len + r).saturating_sub(a).min(k);
    (lo, hi.max(lo))
}

struct Geometry {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    r: usize,
    s: usize,
    d: usize,
}

impl Geometry {
    fn new(x: Shape, cfg: &LocalRelationConfig) -> Self {
        Self {
            h: x.h,
            w: x.w,
            oh: cfg.out_len(x.h),
            ow: cfg.out_len(x.w),
            k: cfg.kernel,
            r: cfg.radius(),
            s: cfg.stride,
            d: cfg.qk_dim,
        }
    }
}

/// Writes normalized weights for output row `ph` of group `g` into `out` (`W' × k × k`).
/// `qn`/`kn` are one sample's anchor queries and keys.
#[allow(clippy::too_many_arguments)]
fn row_weights<T: Element>(
    qn: &[T],
    kn: &[T],
    g: usize,
    ph: usize,
    prior: &GeometricPriorTable<T>,
    cfg: &LocalRelationConfig,
    geo: &Geometry,
    out: &mut [T],
) {
    let Geometry { h, w, oh, ow, k, r, s, d } = *geo;
    let win = k * k;
    let (hw, ohw) = (h * w, oh * ow);
    let pg = prior.group(g);
    let (ylo, yhi) = valid_range(ph * s, r, k, h);
    let mut qv = vec![T::zero(); d];
    let mut kv = vec![T::zero(); d];
    for pw in 0..ow {
        let o = &mut out[pw * win..(pw + 1) * win];
        o.iter_mut().for_each(|v| *v = T::zero());
        let (xlo, xhi) = valid_range(pw * s, r, k, w);
        let mut mx = T::neg_infinity();
        if d == 1 {
            let q = qn[g * ohw + ph * ow + pw];
            let kplane = &kn[g * hw..(g + 1) * hw];
            for ky in ylo..yhi {
                let row = &kplane[(ph * s + ky - r) * w..];
                for kx in xlo..xhi {
                    let l = composability1(q, row[pw * s + kx - r], cfg.variant) + pg[ky * k + kx];
                    o[ky * k + kx] = l;
                    mx = mx.max(l);
                }
            }
        } else {
            for i in 0..d {
                qv[i] = qn[(g * d + i) * ohw + ph * ow + pw];
            }
            for ky in ylo..yhi {
                let ih = ph * s + ky - r;
                for kx in xlo..xhi {
                    let iw = pw * s + kx - r;
                    for i in 0..d {
                        kv[i] = kn[(g * d + i) * hw + ih * w + iw];
                    }
                    let l = composability(&qv, &kv, cfg.variant) + pg[ky * k + kx];
                    o[ky * k + kx] = l;
                    mx = mx.max(l);
                }
            }
        }
        if cfg.normalization == Normalization::Softmax {
            let mut z = T::zero();
            for ky in ylo..yhi {
                for kx in xlo..xhi {
                    let e = (o[ky * k + kx] - mx).exp();
                    o[ky * k + kx] = e;
                    z = z + e;
                }
            }
            let inv = T::one() / z;
            for ky in ylo..yhi {
                for kx in xlo..xhi {
                    o[ky * k + kx] = o[ky * k + kx] * inv;
                }
            }
        }
    }
}

/// Aggregates one output row of one channel plane.
#[inline]
fn aggregate_row<T: Element>(xplane: &[T], weights: &[T], ph: usize, geo: &Geometry, yrow: &mut [T]) {
    let Geometry { h, w, k, r, s, .. } = *geo;
    let win = k * k;
    let (ylo, yhi) = valid_range(ph * s, r, k, h);
    for (pw, yv) in yrow.iter_mut().enumerate() {
        let wv = &weights[pw * win..(pw + 1) * win];
        let (xlo, xhi) = valid_range(pw * s, r, k, w);
        let mut acc = T::zero();
        for ky in ylo..yhi {
            let xrow = &xplane[(ph * s + ky - r) * w + pw * s + xlo - r..];
            let wrow = &wv[ky * k + xlo..ky * k + xhi];
            for (wv, xv) in wrow.iter().zip(xrow) {
                acc = acc + *wv * *xv;
            }
        }
        *yv = acc;
    }
}

fn qk_maps<T: Element>(
    x: &Tensor<T>,
    params: &LocalRelationParams<T>,
    cfg: &LocalRelationConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let q = channel_transform_fwd(&subsample(x, cfg.stride), &params.theta_q)?;
    let k = channel_transform_fwd(x, &params.theta_k)?;
    Ok((q, k))
}

fn apply_output<T: Element>(agg: Tensor<T>, params: &LocalRelationParams<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    match &params.theta_out {
        Some(ct) => Ok((channel_transform_fwd(&agg, ct)?, Some(agg))),
        None => Ok((agg, None)),
    }
}

/// Optimized forward pass; agrees with the reference kernel elementwise.
pub fn lr_forward_optimized<T: Element>(
    x: &Tensor<T>,
    params: &LocalRelationParams<T>,
    cfg: &LocalRelationConfig,
) -> Result<Tensor<T>> {
    check_input(x, params, cfg)?;
    let xs = x.shape();
    let geo = Geometry::new(xs, cfg);
    let os = Shape::new(xs.n, xs.c, geo.oh, geo.ow);
    let mut y = Tensor::zeros(os);
    if os.numel() == 0 {
        return Ok(Tensor::zeros(Shape::new(xs.n, cfg.output_channels(), geo.oh, geo.ow)));
    }
    let prior = prior_or_zero(params, cfg)?;
    let (q_map, k_map) = qk_maps(x, params, cfg)?;
    let (m, groups) = (cfg.channels_per_group, cfg.groups());
    let win = geo.k * geo.k;
    let block = m * os.plane();

    y.data_mut().par_chunks_mut(block).enumerate().for_each(|(idx, yblk)| {
        let (n, g) = (idx / groups, idx % groups);
        let (qn, kn, xn) = (q_map.sample(n), k_map.sample(n), x.sample(n));
        let mut buf = vec![T::zero(); geo.ow * win];
        for ph in 0..geo.oh {
            row_weights(qn, kn, g, ph, &prior, cfg, &geo, &mut buf);
            for j in 0..m {
                let c = g * m + j;
                let xplane = &xn[c * xs.plane()..(c + 1) * xs.plane()];
                let yrow = &mut yblk[j * os.plane() + ph * geo.ow..j * os.plane() + (ph + 1) * geo.ow];
                aggregate_row(xplane, &buf, ph, &geo, yrow);
            }
        }
    });
    let (y, _) = apply_output(y, params)?;
    debug_check_finite(&y, || x.is_finite() && params.is_finite(), "lr_forward_optimized");
    Ok(y)
}

/// Fast forward that also keeps what [`super::lr_backward`] needs.
pub fn lr_forward_train<T: Element>(
    x: &Tensor<T>,
    params: &LocalRelationParams<T>,
    cfg: &LocalRelationConfig,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_input(x, params, cfg)?;
    let xs = x.shape();
    let geo = Geometry::new(xs, cfg);
    let prior = prior_or_zero(params, cfg)?;
    let (q_map, k_map) = qk_maps(x, params, cfg)?;
    let (m, groups) = (cfg.channels_per_group, cfg.groups());
    let win = geo.k * geo.k;
    let os = Shape::new(xs.n, xs.c, geo.oh, geo.ow);

    let mut field = WeightField::zeros(xs.n, groups, geo.oh, geo.ow, geo.k);
    field.mask = build_mask(xs.h, xs.w, cfg);
    let mut agg = Tensor::zeros(os);
    let fblock = geo.oh * geo.ow * win;
    let yblock = m * os.plane();
    if fblock > 0 && yblock > 0 && xs.n > 0 {
        field
            .weights
            .par_chunks_mut(fblock)
            .zip(agg.data_mut().par_chunks_mut(yblock))
            .enumerate()
            .for_each(|(idx, (fblk, yblk))| {
                let (n, g) = (idx / groups, idx % groups);
                let (qn, kn, xn) = (q_map.sample(n), k_map.sample(n), x.sample(n));
                let rowlen = geo.ow * win;
                for ph in 0..geo.oh {
                    let buf = &mut fblk[ph * rowlen..(ph + 1) * rowlen];
                    row_weights(qn, kn, g, ph, &prior, cfg, &geo, buf);
                    for j in 0..m {
                        let c = g * m + j;
                        let xplane = &xn[c * xs.plane()..(c + 1) * xs.plane()];
                        let yrow = &mut yblk[j * os.plane() + ph * geo.ow..j * os.plane() + (ph + 1) * geo.ow];
                        aggregate_row(xplane, buf, ph, &geo, yrow);
                    }
                }
            });
    }
    let (y, aggregated) = apply_output(agg, params)?;
    debug_check_finite(&y, || x.is_finite() && params.is_finite(), "lr_forward_train");
    Ok((y, ForwardCache { x: x.clone(), q_map, k_map, field, prior, aggregated }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local_relation::config::{GeoMode, Variant};
    use crate::local_relation::reference::lr_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(0, 1, 3, 5), (1, 3));
        assert_eq!(valid_range(4, 1, 3, 5), (0, 2));
        assert_eq!(valid_range(2, 1, 3, 5), (0, 3));
        assert_eq!(valid_range(0, 3, 7, 2), (3, 5));
    }

    #[test]
    fn matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (variant, s, d, geo_mode) in [
            (Variant::SquaredDifference, 1, 1, GeoMode::Network),
            (Variant::AbsoluteDifference, 2, 2, GeoMode::Direct),
            (Variant::Multiplication, 2, 1, GeoMode::Off),
        ] {
            let cfg = LocalRelationConfig {
                channels: 8,
                kernel: 5,
                stride: s,
                channels_per_group: 4,
                variant,
                qk_dim: d,
                geo_mode,
                geo_hidden: 6,
                output_transform: s == 2,
                ..Default::default()
            };
            let p = LocalRelationParams::<f32>::init(&cfg, &mut rng).unwrap();
            let x = Tensor::randn(Shape::new(2, 8, 7, 6), 1.0, &mut rng);
            let (yr, cr) = lr_forward(&x, &p, &cfg).unwrap();
            let yo = lr_forward_optimized(&x, &p, &cfg).unwrap();
            let (yt, ct) = lr_forward_train(&x, &p, &cfg).unwrap();
            assert!(yr.max_abs_diff(&yo) < 1e-5);
            assert!(yr.max_abs_diff(&yt) < 1e-5);
            assert_eq!(cr.field.mask, ct.field.mask);
        }
    }

    #[test]
    fn empty_batch() {
        let cfg = LocalRelationConfig { channels: 8, kernel: 3, ..Default::default() };
        let p = LocalRelationParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let y = lr_forward_optimized(&Tensor::zeros(Shape::new(0, 8, 5, 5)), &p, &cfg).unwrap();
        assert_eq!(y.shape(), Shape::new(0, 8, 5, 5));
    }
}
