//! Declarative network description, serialized as JSON.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::local_relation::LocalRelationConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StemKind {
    /// 7×7/2 convolution + BN + ReLU + 3×3/2 max-pool (3×3/1 conv, no pool, in small-image mode).
    Conv7x7,
    /// CT 3→C + BN + ReLU + 7×7 LR/2 + BN + ReLU + max-pool (LR stride 1, no pool, in small-image mode).
    LrStem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    BottleneckConv,
    BottleneckLr,
    BasicConv,
    BasicLr,
}

impl BlockKind {
    pub fn is_lr(self) -> bool {
        matches!(self, Self::BottleneckLr | Self::BasicLr)
    }

    pub fn is_bottleneck(self) -> bool {
        matches!(self, Self::BottleneckConv | Self::BottleneckLr)
    }

    /// The convolutional block with the same layout.
    pub fn conv_counterpart(self) -> Self {
        match self {
            Self::BottleneckLr => Self::BottleneckConv,
            Self::BasicLr => Self::BasicConv,
            k => k,
        }
    }

    /// Inner width of the standard ResNet block producing `out` channels.
    pub fn baseline_inner(self, out: usize) -> usize {
        if self.is_bottleneck() {
            out / 4
        } else {
            out
        }
    }
}

/// One residual block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub inner_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub lr_config: Option<LocalRelationConfig>,
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.inner_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return bad("block channel counts must be positive".into());
        }
        if !(self.stride == 1 || self.stride == 2) {
            return bad(format!("block stride must be 1 or 2, got {}", self.stride));
        }
        match (&self.lr_config, self.kind.is_lr()) {
            (Some(cfg), true) => {
                cfg.validate()?;
                if cfg.channels != self.inner_channels || cfg.stride != self.stride {
                    return bad("lr_config does not match the block's inner width/stride".into());
                }
            }
            (None, false) => {}
            _ => return bad(format!("lr_config must be present iff the block kind is a local relation block ({:?})", self.kind)),
        }
        Ok(())
    }

    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.stride != 1
    }
}

/// Whole-network description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub name: String,
    pub stem: StemKind,
    pub block: BlockKind,
    /// Blocks in res2..res5.
    pub stage_blocks: [usize; 4],
    pub stage_out_channels: [usize; 4],
    /// Fixed inner widths; when absent, conv blocks use the ResNet default and
    /// local relation blocks are solved to match the conv counterpart's FLOPs.
    #[serde(default)]
    pub inner_channels: Option<[usize; 4]>,
    #[serde(default = "default_stem_channels")]
    pub stem_channels: usize,
    pub num_classes: usize,
    pub input_resolution: [usize; 2],
    /// 32×32-scale layout: stride-1 stem without max-pool.
    #[serde(default)]
    pub small_image: bool,
    /// Template for every local relation layer; `channels`, `stride` and `out_channels`
    /// are filled in per layer.
    #[serde(default = "default_lr_template")]
    pub lr: LocalRelationConfig,
}

fn default_stem_channels() -> usize {
    64
}

pub fn default_lr_template() -> LocalRelationConfig {
    LocalRelationConfig { output_transform: true, ..LocalRelationConfig::default() }
}

/// Kernel of the stem's local relation layer.
pub const STEM_LR_KERNEL: usize = 7;

pub const STAGE_NAMES: [&str; 4] = ["res2", "res3", "res4", "res5"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    ResNet18,
    ResNet26,
    ResNet50,
    Lr18,
    Lr26,
    Lr50,
}

impl Preset {
    pub const ALL: [Preset; 6] =
        [Preset::ResNet18, Preset::ResNet26, Preset::ResNet50, Preset::Lr18, Preset::Lr26, Preset::Lr50];

    pub fn name(self) -> &'static str {
        match self {
            Self::ResNet18 => "resnet18",
            Self::ResNet26 => "resnet26",
            Self::ResNet50 => "resnet50",
            Self::Lr18 => "lr18",
            Self::Lr26 => "lr26",
            Self::Lr50 => "lr50",
        }
    }

    pub fn spec(self) -> NetSpec {
        let (block, blocks) = match self {
            Self::ResNet18 => (BlockKind::BasicConv, [2, 2, 2, 2]),
            Self::ResNet26 => (BlockKind::BottleneckConv, [2, 2, 2, 2]),
            Self::ResNet50 => (BlockKind::BottleneckConv, [3, 4, 6, 3]),
            Self::Lr18 => (BlockKind::BasicLr, [2, 2, 2, 2]),
            Self::Lr26 => (BlockKind::BottleneckLr, [2, 2, 2, 2]),
            Self::Lr50 => (BlockKind::BottleneckLr, [3, 4, 6, 3]),
        };
        let outs = if block.is_bottleneck() { [256, 512, 1024, 2048] } else { [64, 128, 256, 512] };
        NetSpec {
            name: self.name().to_string(),
            stem: if block.is_lr() { StemKind::LrStem } else { StemKind::Conv7x7 },
            block,
            stage_blocks: blocks,
            stage_out_channels: outs,
            inner_channels: None,
            stem_channels: 64,
            num_classes: 1000,
            input_resolution: [224, 224],
            small_image: false,
            lr: default_lr_template(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}` (expected resnet18|resnet26|resnet50|lr18|lr26|lr50)")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl NetSpec {
    /// Same network at 32×32 with `num_classes` outputs.
    pub fn small_image(mut self, num_classes: usize) -> Self {
        self.small_image = true;
        self.input_resolution = [32, 32];
        self.num_classes = num_classes;
        self
    }

    /// Total spatial reduction from input to res5.
    pub fn reduction(&self) -> usize {
        if self.small_image {
            8
        } else {
            32
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stage_blocks.iter().any(|&b| b == 0) {
            return bad("every stage needs at least one block".into());
        }
        if self.stage_out_channels.iter().any(|&c| c == 0) || self.stem_channels == 0 || self.num_classes == 0 {
            return bad("channel counts and num_classes must be positive".into());
        }
        let [h, w] = self.input_resolution;
        let r = self.reduction();
        if h == 0 || w == 0 || h % r != 0 || w % r != 0 {
            return bad(format!("input resolution {h}x{w} must be a positive multiple of {r}"));
        }
        if let Some(inner) = self.inner_channels {
            if inner.iter().any(|&c| c == 0) {
                return bad("inner widths must be positive".into());
            }
        }
        if self.block.is_lr() || self.stem == StemKind::LrStem {
            let probe = LocalRelationConfig { channels: self.lr.channels_per_group, stride: 1, out_channels: None, ..self.lr };
            probe.validate()?;
            if self.stem == StemKind::LrStem && self.stem_channels % self.lr.channels_per_group != 0 {
                return bad(format!(
                    "stem width {} is not a multiple of channels_per_group {}",
                    self.stem_channels, self.lr.channels_per_group
                ));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("spec serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_roundtrip() {
        for p in Preset::ALL {
            let s = p.spec();
            s.validate().unwrap();
            let back = NetSpec::from_json(&s.to_json().unwrap()).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.hash(), s.hash());
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn bad_resolution() {
        let mut s = Preset::ResNet50.spec();
        s.input_resolution = [100, 100];
        assert!(s.validate().is_err());
        let mut small = s.small_image(10);
        small.input_resolution = [20, 20];
        assert!(small.validate().is_err());
    }

    #[test]
    fn block_spec_lr_config_presence() {
        let b = BlockSpec {
            kind: BlockKind::BottleneckLr,
            in_channels: 64,
            inner_channels: 96,
            out_channels: 256,
            stride: 1,
            lr_config: None,
        };
        assert!(b.validate().is_err());
        let ok = BlockSpec { lr_config: Some(LocalRelationConfig::new(96)), ..b.clone() };
        ok.validate().unwrap();
        let conv = BlockSpec { kind: BlockKind::BottleneckConv, ..ok };
        assert!(conv.validate().is_err());
    }
}
