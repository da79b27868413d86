use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pairwise appearance composability Φ(q, k).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// `−Σ (q_i − k_i)²`
    SquaredDifference,
    /// `−Σ |q_i − k_i|`
    AbsoluteDifference,
    /// `Σ q_i · k_i`
    Multiplication,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Softmax,
    None,
}

/// How the per-offset prior logits are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeoMode {
    /// Two channel transforms with a ReLU in between, applied to `(dy, dx)`.
    Network,
    /// One free logit per group and offset.
    Direct,
    Off,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::SquaredDifference, Variant::AbsoluteDifference, Variant::Multiplication];

    pub fn short_name(self) -> &'static str {
        match self {
            Variant::SquaredDifference => "sqdiff",
            Variant::AbsoluteDifference => "absdiff",
            Variant::Multiplication => "mul",
        }
    }
}

impl GeoMode {
    pub const ALL: [GeoMode; 3] = [GeoMode::Network, GeoMode::Direct, GeoMode::Off];

    pub fn short_name(self) -> &'static str {
        match self {
            GeoMode::Network => "network",
            GeoMode::Direct => "direct",
            GeoMode::Off => "off",
        }
    }
}

impl Normalization {
    pub const ALL: [Normalization; 2] = [Normalization::Softmax, Normalization::None];

    pub fn short_name(self) -> &'static str {
        match self {
            Normalization::Softmax => "softmax",
            Normalization::None => "none",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sqdiff" | "squared_difference" => Ok(Variant::SquaredDifference),
            "absdiff" | "absolute_difference" => Ok(Variant::AbsoluteDifference),
            "mul" | "multiplication" => Ok(Variant::Multiplication),
            _ => Err(Error::Config(format!("unknown composability variant `{s}`"))),
        }
    }
}

impl FromStr for GeoMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "network" => Ok(GeoMode::Network),
            "direct" => Ok(GeoMode::Direct),
            "off" => Ok(GeoMode::Off),
            _ => Err(Error::Config(format!("unknown geo mode `{s}`"))),
        }
    }
}

impl FromStr for Normalization {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(Normalization::Softmax),
            "none" => Ok(Normalization::None),
            _ => Err(Error::Config(format!("unknown normalization `{s}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl fmt::Display for GeoMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

pub const MAX_KERNEL: usize = 9;

/// Hyper-parameters of one local relation layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalRelationConfig {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub channels_per_group: usize,
    pub variant: Variant,
    pub qk_dim: usize,
    pub geo_hidden: usize,
    pub normalization: Normalization,
    pub geo_mode: GeoMode,
    /// Adds a bias-free channel transform after aggregation.
    pub output_transform: bool,
    /// Width of the output transform; `None` keeps `C`.
    pub out_channels: Option<usize>,
}

impl Default for LocalRelationConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            kernel: 7,
            stride: 1,
            channels_per_group: 8,
            variant: Variant::SquaredDifference,
            qk_dim: 1,
            geo_hidden: 32,
            normalization: Normalization::Softmax,
            geo_mode: GeoMode::Network,
            output_transform: false,
            out_channels: None,
        }
    }
}

impl LocalRelationConfig {
    pub fn new(channels: usize) -> Self {
        Self { channels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 {
            return bad("channels must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel));
        }
        if self.kernel > MAX_KERNEL {
            return bad(format!("kernel size {} exceeds the supported maximum {MAX_KERNEL}", self.kernel));
        }
        if !(self.stride == 1 || self.stride == 2) {
            return bad(format!("stride must be 1 or 2, got {}", self.stride));
        }
        if self.channels_per_group == 0 || self.channels % self.channels_per_group != 0 {
            return bad(format!(
                "channels_per_group {} must divide channels {}",
                self.channels_per_group, self.channels
            ));
        }
        if self.qk_dim == 0 {
            return bad("qk_dim must be at least 1".into());
        }
        if self.geo_mode == GeoMode::Network && self.geo_hidden == 0 {
            return bad("geo_hidden must be positive for the prior network".into());
        }
        match self.out_channels {
            Some(0) => return bad("out_channels must be positive".into()),
            Some(c) if !self.output_transform && c != self.channels => {
                return bad("out_channels differs from channels but output_transform is off".into())
            }
            _ => {}
        }
        Ok(())
    }

    /// Channels of the layer output.
    pub fn output_channels(&self) -> usize {
        self.out_channels.unwrap_or(self.channels)
    }

    pub fn groups(&self) -> usize {
        self.channels / self.channels_per_group
    }

    pub fn radius(&self) -> usize {
        self.kernel / 2
    }

    pub fn window(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Query/key channels: `G · d`.
    pub fn qk_channels(&self) -> usize {
        self.groups() * self.qk_dim
    }

    pub fn out_len(&self, len: usize) -> usize {
        len.div_ceil(self.stride)
    }
}
