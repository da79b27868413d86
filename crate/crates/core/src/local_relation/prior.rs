//! Geometric prior: per-group logits over relative offsets, and their gradients.

use super::config::{GeoMode, LocalRelationConfig};
use super::params::{GeoGrads, GeoParams, LocalRelationParams};
use crate::error::{shape_err, Error, Result};
use crate::ops::ChannelTransform;
use crate::tensor::{Element, Shape, Tensor};

/// Pre-softmax prior logits indexed `[g][dy + r][dx + r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricPriorTable<T = f32> {
    pub groups: usize,
    pub kernel: usize,
    pub values: Vec<T>,
}

impl<T: Element> GeometricPriorTable<T> {
    pub fn zeros(groups: usize, kernel: usize) -> Self {
        Self { groups, kernel, values: vec![T::zero(); groups * kernel * kernel] }
    }

    #[inline]
    pub fn get(&self, g: usize, ky: usize, kx: usize) -> T {
        self.values[(g * self.kernel + ky) * self.kernel + kx]
    }

    pub fn group(&self, g: usize) -> &[T] {
        let w = self.kernel * self.kernel;
        &self.values[g * w..(g + 1) * w]
    }

    /// Softmax of the prior alone over the full `k × k` window, per group.
    pub fn softmax(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.values.len());
        for g in 0..self.groups {
            let row = self.group(g);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: T = e.iter().copied().sum();
            out.extend(e.into_iter().map(|v| v / z));
        }
        out
    }
}

/// Offset fed to the prior network for window index `i` (0-based) of radius `r`.
#[inline]
pub fn offset_value<T: Element>(i: usize, r: usize) -> T {
    T::lit(i as f64 - r as f64)
}

fn hidden_preact<T: Element>(first: &ChannelTransform<T>, dy: T, dx: T, j: usize) -> T {
    let w = first.weight.data();
    let b = first.bias.as_ref().expect("prior network bias").data();
    w[j * 2] * dy + w[j * 2 + 1] * dx + b[j]
}

/// Evaluates the prior for every group and offset; the same routine serves
/// training (per-offset evaluation) and inference (frozen table).
pub fn materialize_prior<T: Element>(
    params: &LocalRelationParams<T>,
    cfg: &LocalRelationConfig,
) -> Result<GeometricPriorTable<T>> {
    let (g, k, r) = (cfg.groups(), cfg.kernel, cfg.radius());
    match (&params.geo, cfg.geo_mode) {
        (_, GeoMode::Off) | (GeoParams::Off, _) => Err(Error::PriorDisabled),
        (GeoParams::Direct(t), GeoMode::Direct) => {
            if t.shape() != Shape::new(1, g, k, k) {
                return shape_err(format!("direct prior table {} for G={g}, k={k}", t.shape()));
            }
            Ok(GeometricPriorTable { groups: g, kernel: k, values: t.data().to_vec() })
        }
        (GeoParams::Network { first, second }, GeoMode::Network) => {
            let hidden = first.out_channels();
            let w2 = second.weight.data();
            let b2 = second.bias.as_ref().expect("prior network bias").data();
            let mut table = GeometricPriorTable::zeros(g, k);
            let mut act = vec![T::zero(); hidden];
            for ky in 0..k {
                for kx in 0..k {
                    let (dy, dx) = (offset_value::<T>(ky, r), offset_value::<T>(kx, r));
                    for (j, a) in act.iter_mut().enumerate() {
                        *a = hidden_preact(first, dy, dx, j).max(T::zero());
                    }
                    for gi in 0..g {
                        let mut v = b2[gi];
                        for j in 0..hidden {
                            v = v + w2[gi * hidden + j] * act[j];
                        }
                        table.values[(gi * k + ky) * k + kx] = v;
                    }
                }
            }
            Ok(table)
        }
        _ => shape_err("prior parameters do not match geo_mode"),
    }
}

/// Prior logits, or zeros when the prior is disabled.
pub fn prior_or_zero<T: Element>(
    params: &LocalRelationParams<T>,
    cfg: &LocalRelationConfig,
) -> Result<GeometricPriorTable<T>> {
    match cfg.geo_mode {
        GeoMode::Off => Ok(GeometricPriorTable::zeros(cfg.groups(), cfg.kernel)),
        _ => materialize_prior(params, cfg),
    }
}

/// Back-propagates `∂L/∂table` into the prior parameters.
pub fn prior_backward<T: Element>(
    params: &LocalRelationParams<T>,
    cfg: &LocalRelationConfig,
    grad_table: &[T],
) -> Result<GeoGrads<T>> {
    let (g, k, r) = (cfg.groups(), cfg.kernel, cfg.radius());
    if grad_table.len() != g * k * k {
        return shape_err("prior gradient table has the wrong size");
    }
    match &params.geo {
        GeoParams::Off => Ok(GeoGrads::Off),
        GeoParams::Direct(t) => Ok(GeoGrads::Direct(Tensor::from_vec(t.shape(), grad_table.to_vec())?)),
        GeoParams::Network { first, second } => {
            let hidden = first.out_channels();
            let w2 = second.weight.data();
            let mut gw1 = Tensor::zeros(first.weight.shape());
            let mut gb1 = Tensor::zeros(Shape::new(1, hidden, 1, 1));
            let mut gw2 = Tensor::zeros(second.weight.shape());
            let mut gb2 = Tensor::zeros(Shape::new(1, g, 1, 1));
            let mut act = vec![T::zero(); hidden];
            let mut pre = vec![T::zero(); hidden];
            for ky in 0..k {
                for kx in 0..k {
                    let (dy, dx) = (offset_value::<T>(ky, r), offset_value::<T>(kx, r));
                    for j in 0..hidden {
                        pre[j] = hidden_preact(first, dy, dx, j);
                        act[j] = pre[j].max(T::zero());
                    }
                    for gi in 0..g {
                        let gt = grad_table[(gi * k + ky) * k + kx];
                        gb2.data_mut()[gi] = gb2.data()[gi] + gt;
                        for j in 0..hidden {
                            let idx = gi * hidden + j;
                            gw2.data_mut()[idx] = gw2.data()[idx] + gt * act[j];
                        }
                    }
                    for j in 0..hidden {
                        if pre[j] <= T::zero() {
                            continue;
                        }
                        let mut gh = T::zero();
                        for gi in 0..g {
                            gh = gh + grad_table[(gi * k + ky) * k + kx] * w2[gi * hidden + j];
                        }
                        gb1.data_mut()[j] = gb1.data()[j] + gh;
                        gw1.data_mut()[j * 2] = gw1.data()[j * 2] + gh * dy;
                        gw1.data_mut()[j * 2 + 1] = gw1.data()[j * 2 + 1] + gh * dx;
                    }
                }
            }
            Ok(GeoGrads::Network { first_weight: gw1, first_bias: gb1, second_weight: gw2, second_bias: gb2 })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: GeoMode) -> LocalRelationConfig {
        LocalRelationConfig { channels: 8, kernel: 3, channels_per_group: 4, geo_mode: mode, geo_hidden: 5, ..Default::default() }
    }

    #[test]
    fn zero_network_gives_zero_table() {
        let c = cfg(GeoMode::Network);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = LocalRelationParams::<f64>::init(&c, &mut rng).unwrap();
        if let GeoParams::Network { first, .. } = &mut p.geo {
            first.weight.fill(0.0);
        }
        let t = materialize_prior(&p, &c).unwrap();
        assert!(t.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn direct_table_returned_verbatim() {
        let c = cfg(GeoMode::Direct);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = LocalRelationParams::<f64>::init(&c, &mut rng).unwrap();
        let table = Tensor::randn(Shape::new(1, 2, 3, 3), 1.0, &mut rng);
        p.geo = GeoParams::Direct(table.clone());
        assert_eq!(materialize_prior(&p, &c).unwrap().values, table.data());
    }

    #[test]
    fn off_mode_is_an_error() {
        let c = cfg(GeoMode::Off);
        let p = LocalRelationParams::<f64>::init(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(matches!(materialize_prior(&p, &c), Err(Error::PriorDisabled)));
    }

    #[test]
    fn zero_initialized_second_layer_gives_flat_prior() {
        let c = cfg(GeoMode::Network);
        let p = LocalRelationParams::<f32>::init(&c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let t = materialize_prior(&p, &c).unwrap();
        assert!(t.values.iter().all(|&v| v == 0.0));
        let sm = t.softmax();
        assert!(sm.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-7));
    }
}
