use rand::Rng;

use super::config::{GeoMode, LocalRelationConfig};
use crate::error::{shape_err, Result};
use crate::ops::ChannelTransform;
use crate::tensor::{Element, Shape, Tensor};

/// Learnable geometric prior.
#[derive(Clone, Debug, PartialEq)]
pub enum GeoParams<T = f32> {
    /// `2 → hidden → G` with ReLU in between; both layers carry a bias.
    Network { first: ChannelTransform<T>, second: ChannelTransform<T> },
    /// Table of shape `(1, G, k, k)`.
    Direct(Tensor<T>),
    Off,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalRelationParams<T = f32> {
    /// `C → G·d`, no bias.
    pub theta_q: ChannelTransform<T>,
    /// `C → G·d`, no bias.
    pub theta_k: ChannelTransform<T>,
    pub geo: GeoParams<T>,
    /// Present iff `config.output_transform`.
    pub theta_out: Option<ChannelTransform<T>>,
}

impl<T: Element> LocalRelationParams<T> {
    /// Query/key: Gaussian with std `1/√C`. Prior network: first layer Gaussian with
    /// std `1/√2`, second layer zero, so the prior starts out flat. Direct table: zero.
    pub fn init<R: Rng + ?Sized>(cfg: &LocalRelationConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let qk = cfg.qk_channels();
        let theta_q = ChannelTransform::init_gaussian(qk, c, false, 1.0, rng);
        let theta_k = ChannelTransform::init_gaussian(qk, c, false, 1.0, rng);
        let geo = match cfg.geo_mode {
            GeoMode::Network => GeoParams::Network {
                first: ChannelTransform::init_gaussian(cfg.geo_hidden, 2, true, 1.0, rng),
                second: ChannelTransform::zeros(cfg.groups(), cfg.geo_hidden, true),
            },
            GeoMode::Direct => GeoParams::Direct(Tensor::zeros(Shape::new(1, cfg.groups(), cfg.kernel, cfg.kernel))),
            GeoMode::Off => GeoParams::Off,
        };
        let theta_out = cfg
            .output_transform
            .then(|| ChannelTransform::init_gaussian(cfg.output_channels(), c, false, 2f64.sqrt(), rng));
        Ok(Self { theta_q, theta_k, geo, theta_out })
    }

    pub fn validate(&self, cfg: &LocalRelationConfig) -> Result<()> {
        cfg.validate()?;
        let (c, qk, g) = (cfg.channels, cfg.qk_channels(), cfg.groups());
        for (name, ct) in [("theta_q", &self.theta_q), ("theta_k", &self.theta_k)] {
            if ct.in_channels() != c || ct.out_channels() != qk {
                return shape_err(format!(
                    "{name} is {}→{}, expected {c}→{qk}",
                    ct.in_channels(),
                    ct.out_channels()
                ));
            }
        }
        match (&self.geo, cfg.geo_mode) {
            (GeoParams::Network { first, second }, GeoMode::Network) => {
                if first.in_channels() != 2
                    || first.out_channels() != cfg.geo_hidden
                    || second.in_channels() != cfg.geo_hidden
                    || second.out_channels() != g
                    || first.bias.is_none()
                    || second.bias.is_none()
                {
                    return shape_err("prior network shape does not match config");
                }
            }
            (GeoParams::Direct(t), GeoMode::Direct) => {
                if t.shape() != Shape::new(1, g, cfg.kernel, cfg.kernel) {
                    return shape_err(format!("direct prior table {} for {g} groups, k={}", t.shape(), cfg.kernel));
                }
            }
            (GeoParams::Off, GeoMode::Off) => {}
            _ => return shape_err("prior parameters do not match geo_mode"),
        }
        match (&self.theta_out, cfg.output_transform) {
            (Some(ct), true) if ct.in_channels() == c && ct.out_channels() == cfg.output_channels() => {}
            (None, false) => {}
            _ => return shape_err("output transform does not match config"),
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        let geo = match &self.geo {
            GeoParams::Network { first, second } => first.num_params() + second.num_params(),
            GeoParams::Direct(t) => t.numel(),
            GeoParams::Off => 0,
        };
        self.theta_q.num_params()
            + self.theta_k.num_params()
            + geo
            + self.theta_out.as_ref().map_or(0, |t| t.num_params())
    }

    pub fn is_finite(&self) -> bool {
        let geo = match &self.geo {
            GeoParams::Network { first, second } => first.is_finite() && second.is_finite(),
            GeoParams::Direct(t) => t.is_finite(),
            GeoParams::Off => true,
        };
        self.theta_q.is_finite() && self.theta_k.is_finite() && geo && self.theta_out.as_ref().is_none_or(|t| t.is_finite())
    }

    pub fn cast<U: Element>(&self) -> LocalRelationParams<U> {
        let ct = |c: &ChannelTransform<T>| ChannelTransform {
            weight: c.weight.cast(),
            bias: c.bias.as_ref().map(|b| b.cast()),
        };
        LocalRelationParams {
            theta_q: ct(&self.theta_q),
            theta_k: ct(&self.theta_k),
            geo: match &self.geo {
                GeoParams::Network { first, second } => GeoParams::Network { first: ct(first), second: ct(second) },
                GeoParams::Direct(t) => GeoParams::Direct(t.cast()),
                GeoParams::Off => GeoParams::Off,
            },
            theta_out: self.theta_out.as_ref().map(ct),
        }
    }
}

/// Gradients of the prior parameters, mirroring [`GeoParams`].
#[derive(Clone, Debug, PartialEq)]
pub enum GeoGrads<T = f32> {
    Network { first_weight: Tensor<T>, first_bias: Tensor<T>, second_weight: Tensor<T>, second_bias: Tensor<T> },
    Direct(Tensor<T>),
    Off,
}

#[derive(Clone, Debug)]
pub struct LocalRelationGrads<T = f32> {
    pub grad_x: Tensor<T>,
    pub theta_q: Tensor<T>,
    pub theta_k: Tensor<T>,
    pub geo: GeoGrads<T>,
    pub theta_out: Option<Tensor<T>>,
}
