//! Shape-annotated layer plans. A plan fixes every layer's kind and shapes without
//! allocating parameters, so cost accounting and width solving stay cheap.

use serde::Serialize;

use super::solver::solve_stage_width;
use super::spec::{BlockKind, BlockSpec, NetSpec, StemKind, STAGE_NAMES, STEM_LR_KERNEL};
use crate::error::{shape_err, Result};
use crate::local_relation::LocalRelationConfig;
use crate::ops::{maxpool_out_len, strided_len};

/// Per-sample feature map extent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct MapShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl MapShape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub fn plane(&self) -> u64 {
        (self.h * self.w) as u64
    }
}

impl std::fmt::Display for MapShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum LayerKind {
    /// Odd-kernel convolution with padding `⌊k/2⌋`, no bias.
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize },
    /// 1×1 transform, bias-free; `stride` samples the input first.
    ChannelTransform { in_channels: usize, out_channels: usize, stride: usize },
    BatchNorm { channels: usize },
    Relu,
    MaxPool,
    LocalRelation(LocalRelationConfig),
    GlobalAvgPool,
    Linear { in_features: usize, out_features: usize },
}

impl LayerKind {
    /// Layers that count towards network depth.
    pub fn is_weight_layer(&self) -> bool {
        matches!(self, Self::Conv { .. } | Self::ChannelTransform { .. } | Self::LocalRelation(_) | Self::Linear { .. })
    }

    pub fn is_spatial_conv(&self) -> bool {
        matches!(self, Self::Conv { kernel, .. } if *kernel > 1)
    }

    pub fn label(&self) -> String {
        match self {
            Self::Conv { kernel, stride, .. } => format!("conv{kernel}x{kernel}/{stride}"),
            Self::ChannelTransform { stride, .. } => format!("ct/{stride}"),
            Self::BatchNorm { .. } => "bn".into(),
            Self::Relu => "relu".into(),
            Self::MaxPool => "maxpool".into(),
            Self::LocalRelation(c) => format!("lr{}x{}/{}(m={})", c.kernel, c.kernel, c.stride, c.channels_per_group),
            Self::GlobalAvgPool => "avgpool".into(),
            Self::Linear { .. } => "fc".into(),
        }
    }

    pub fn output_shape(&self, x: MapShape) -> Result<MapShape> {
        let expect = |c: usize| -> Result<()> {
            if x.c != c {
                return shape_err(format!("layer {} expects {c} channels, got {x}", self.label()));
            }
            Ok(())
        };
        Ok(match *self {
            Self::Conv { in_channels, out_channels, stride, .. }
            | Self::ChannelTransform { in_channels, out_channels, stride } => {
                expect(in_channels)?;
                MapShape::new(out_channels, strided_len(x.h, stride), strided_len(x.w, stride))
            }
            Self::BatchNorm { channels } => {
                expect(channels)?;
                x
            }
            Self::Relu => x,
            Self::MaxPool => MapShape::new(x.c, maxpool_out_len(x.h), maxpool_out_len(x.w)),
            Self::LocalRelation(ref cfg) => {
                cfg.validate()?;
                expect(cfg.channels)?;
                MapShape::new(cfg.output_channels(), cfg.out_len(x.h), cfg.out_len(x.w))
            }
            Self::GlobalAvgPool => MapShape::new(x.c, 1, 1),
            Self::Linear { in_features, out_features } => {
                if x.h != 1 || x.w != 1 {
                    return shape_err(format!("fc expects a pooled map, got {x}"));
                }
                expect(in_features)?;
                MapShape::new(out_features, 1, 1)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerPlan {
    pub name: String,
    pub kind: LayerKind,
    pub input: MapShape,
    pub output: MapShape,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockPlan {
    pub name: String,
    pub spec: BlockSpec,
    pub branch: Vec<LayerPlan>,
    /// Empty for identity shortcuts; otherwise a strided CT followed by BN.
    pub shortcut: Vec<LayerPlan>,
    pub input: MapShape,
    pub output: MapShape,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NetworkPlan {
    pub spec: NetSpec,
    pub inner_widths: [usize; 4],
    pub stem: Vec<LayerPlan>,
    pub blocks: Vec<BlockPlan>,
    pub head: Vec<LayerPlan>,
}

struct Chain {
    prefix: String,
    cur: MapShape,
    layers: Vec<LayerPlan>,
}

impl Chain {
    fn new(prefix: &str, input: MapShape) -> Self {
        Self { prefix: prefix.to_string(), cur: input, layers: Vec::new() }
    }

    fn push(&mut self, name: &str, kind: LayerKind) -> Result<&mut Self> {
        let output = kind.output_shape(self.cur)?;
        let name = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.layers.push(LayerPlan { name, kind, input: self.cur, output });
        self.cur = output;
        Ok(self)
    }
}

/// Local relation config for a layer of width `channels` derived from the spec template.
pub fn lr_layer_config(template: &LocalRelationConfig, channels: usize, stride: usize) -> LocalRelationConfig {
    LocalRelationConfig { channels, stride, out_channels: None, ..*template }
}

/// Stem layers; standard mode gives `C×H/4×W/4`, small-image mode keeps `H×W`.
pub fn stem_layers(spec: &NetSpec) -> Result<Vec<LayerPlan>> {
    let [h, w] = spec.input_resolution;
    let c = spec.stem_channels;
    let mut ch = Chain::new("stem", MapShape::new(3, h, w));
    let s = if spec.small_image { 1 } else { 2 };
    match spec.stem {
        StemKind::Conv7x7 => {
            let k = if spec.small_image { 3 } else { 7 };
            ch.push("conv", LayerKind::Conv { in_channels: 3, out_channels: c, kernel: k, stride: s })?;
            ch.push("bn", LayerKind::BatchNorm { channels: c })?.push("relu", LayerKind::Relu)?;
        }
        StemKind::LrStem => {
            let cfg = LocalRelationConfig { kernel: STEM_LR_KERNEL, ..lr_layer_config(&spec.lr, c, s) };
            ch.push("ct", LayerKind::ChannelTransform { in_channels: 3, out_channels: c, stride: 1 })?;
            ch.push("bn1", LayerKind::BatchNorm { channels: c })?.push("relu1", LayerKind::Relu)?;
            ch.push("lr", LayerKind::LocalRelation(cfg))?;
            ch.push("bn2", LayerKind::BatchNorm { channels: c })?.push("relu2", LayerKind::Relu)?;
        }
    }
    if !spec.small_image {
        ch.push("pool", LayerKind::MaxPool)?;
    }
    Ok(ch.layers)
}

/// Residual block: branch layers (final BN before the add) plus projection shortcut if needed.
pub fn block_plan(name: &str, b: &BlockSpec, input: MapShape) -> Result<BlockPlan> {
    b.validate()?;
    let (cin, w, out, s) = (b.in_channels, b.inner_channels, b.out_channels, b.stride);
    let mut ch = Chain::new(name, input);
    match b.kind {
        BlockKind::BottleneckConv | BlockKind::BottleneckLr => {
            ch.push("ct1", LayerKind::ChannelTransform { in_channels: cin, out_channels: w, stride: 1 })?;
            ch.push("bn1", LayerKind::BatchNorm { channels: w })?.push("relu1", LayerKind::Relu)?;
            match &b.lr_config {
                Some(cfg) => ch.push("lr", LayerKind::LocalRelation(*cfg))?,
                None => ch.push("conv", LayerKind::Conv { in_channels: w, out_channels: w, kernel: 3, stride: s })?,
            };
            ch.push("bn2", LayerKind::BatchNorm { channels: w })?.push("relu2", LayerKind::Relu)?;
            ch.push("ct2", LayerKind::ChannelTransform { in_channels: w, out_channels: out, stride: 1 })?;
            ch.push("bn3", LayerKind::BatchNorm { channels: out })?;
        }
        BlockKind::BasicConv => {
            ch.push("conv1", LayerKind::Conv { in_channels: cin, out_channels: w, kernel: 3, stride: s })?;
            ch.push("bn1", LayerKind::BatchNorm { channels: w })?.push("relu1", LayerKind::Relu)?;
            ch.push("conv2", LayerKind::Conv { in_channels: w, out_channels: out, kernel: 3, stride: 1 })?;
            ch.push("bn2", LayerKind::BatchNorm { channels: out })?;
        }
        BlockKind::BasicLr => {
            let cfg = b.lr_config.expect("validated");
            ch.push("ct1", LayerKind::ChannelTransform { in_channels: cin, out_channels: w, stride: 1 })?;
            ch.push("bn1", LayerKind::BatchNorm { channels: w })?.push("relu1", LayerKind::Relu)?;
            ch.push("lr", LayerKind::LocalRelation(cfg))?;
            ch.push("bn2", LayerKind::BatchNorm { channels: out })?;
        }
    }
    let output = ch.cur;
    if output.c != out {
        return shape_err(format!("block {name} produces {output}, expected {out} channels"));
    }
    let mut sc = Chain::new(&format!("{name}.shortcut"), input);
    if b.has_projection() {
        sc.push("ct", LayerKind::ChannelTransform { in_channels: cin, out_channels: out, stride: s })?;
        sc.push("bn", LayerKind::BatchNorm { channels: out })?;
    }
    if sc.cur != output {
        return shape_err(format!("block {name}: shortcut {} does not match branch {output}", sc.cur));
    }
    Ok(BlockPlan { name: name.to_string(), spec: b.clone(), branch: ch.layers, shortcut: sc.layers, input, output })
}

/// Block specs of one stage at inner width `width`.
pub fn stage_block_specs(spec: &NetSpec, stage: usize, kind: BlockKind, width: usize, in_channels: usize) -> Vec<BlockSpec> {
    let out = spec.stage_out_channels[stage];
    let first_stride = if stage == 0 { 1 } else { 2 };
    (0..spec.stage_blocks[stage])
        .map(|i| {
            let stride = if i == 0 { first_stride } else { 1 };
            let lr_config = kind.is_lr().then(|| {
                let mut cfg = lr_layer_config(&spec.lr, width, stride);
                if kind == BlockKind::BasicLr && width != out {
                    cfg.output_transform = true;
                    cfg.out_channels = Some(out);
                }
                cfg
            });
            BlockSpec {
                kind,
                in_channels: if i == 0 { in_channels } else { out },
                inner_channels: width,
                out_channels: out,
                stride,
                lr_config,
            }
        })
        .collect()
}

/// Plans every block of a stage.
pub fn stage_plan(spec: &NetSpec, stage: usize, kind: BlockKind, width: usize, input: MapShape) -> Result<Vec<BlockPlan>> {
    let mut cur = input;
    let mut out = Vec::new();
    for (i, b) in stage_block_specs(spec, stage, kind, width, input.c).iter().enumerate() {
        let p = block_plan(&format!("{}.{i}", STAGE_NAMES[stage]), b, cur)?;
        cur = p.output;
        out.push(p);
    }
    Ok(out)
}

/// Builds the full plan, solving local relation inner widths when the spec leaves them open.
pub fn plan_network(spec: &NetSpec) -> Result<NetworkPlan> {
    spec.validate()?;
    let stem = stem_layers(spec)?;
    let mut cur = stem.last().expect("stem is never empty").output;
    let mut blocks = Vec::new();
    let mut inner_widths = [0; 4];
    for stage in 0..4 {
        let width = match spec.inner_channels {
            Some(w) => w[stage],
            None if spec.block.is_lr() => solve_stage_width(spec, stage, cur)?,
            None => spec.block.baseline_inner(spec.stage_out_channels[stage]),
        };
        inner_widths[stage] = width;
        let stage_blocks = stage_plan(spec, stage, spec.block, width, cur)?;
        cur = stage_blocks.last().expect("stage has blocks").output;
        blocks.extend(stage_blocks);
    }
    let mut head = Chain::new("", cur);
    head.push("avgpool", LayerKind::GlobalAvgPool)?;
    head.push("fc", LayerKind::Linear { in_features: cur.c, out_features: spec.num_classes })?;
    Ok(NetworkPlan { spec: spec.clone(), inner_widths, stem, blocks, head: head.layers })
}

impl NetworkPlan {
    /// Every layer in execution order (each block's branch, then its shortcut).
    pub fn layers(&self) -> Vec<&LayerPlan> {
        let mut v: Vec<&LayerPlan> = self.stem.iter().collect();
        for b in &self.blocks {
            v.extend(&b.branch);
            v.extend(&b.shortcut);
        }
        v.extend(&self.head);
        v
    }

    /// Weight layers on the main path: the stem counts once, shortcut projections not at all.
    pub fn depth(&self) -> usize {
        let branch: usize = self.blocks.iter().map(|b| b.branch.iter().filter(|l| l.kind.is_weight_layer()).count()).sum();
        1 + branch + 1
    }

    pub fn stem_output(&self) -> MapShape {
        self.stem.last().expect("stem").output
    }

    /// Output of res2..res5.
    pub fn stage_outputs(&self) -> [MapShape; 4] {
        let mut out = [MapShape::new(0, 0, 0); 4];
        let mut i = 0;
        for (s, &n) in self.spec.stage_blocks.iter().enumerate() {
            i += n;
            out[s] = self.blocks[i - 1].output;
        }
        out
    }

    pub fn output(&self) -> MapShape {
        self.head.last().expect("head").output
    }

    pub fn count_spatial_convs(&self) -> usize {
        self.layers().iter().filter(|l| l.kind.is_spatial_conv()).count()
    }

    pub fn find(&self, name: &str) -> Option<&LayerPlan> {
        self.layers().into_iter().find(|l| l.name == name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::spec::Preset;

    #[test]
    fn resnet50_extents_and_depth() {
        let p = plan_network(&Preset::ResNet50.spec()).unwrap();
        assert_eq!(p.stem[0].output, MapShape::new(64, 112, 112));
        assert_eq!(p.stem_output(), MapShape::new(64, 56, 56));
        let hw: Vec<usize> = p.stage_outputs().iter().map(|s| s.h).collect();
        assert_eq!(hw, vec![56, 28, 14, 7]);
        assert_eq!(p.depth(), 50);
        assert_eq!(p.inner_widths, [64, 128, 256, 512]);
        assert_eq!(p.output(), MapShape::new(1000, 1, 1));
    }

    #[test]
    fn conv_bottleneck_identity_shape() {
        let b = BlockSpec {
            kind: BlockKind::BottleneckConv,
            in_channels: 256,
            inner_channels: 64,
            out_channels: 256,
            stride: 1,
            lr_config: None,
        };
        let p = block_plan("b", &b, MapShape::new(256, 56, 56)).unwrap();
        assert_eq!(p.output, p.input);
        assert!(p.shortcut.is_empty());
    }

    #[test]
    fn shape_mismatch_caught_at_plan_time() {
        let b = BlockSpec {
            kind: BlockKind::BottleneckConv,
            in_channels: 128,
            inner_channels: 64,
            out_channels: 256,
            stride: 1,
            lr_config: None,
        };
        assert!(block_plan("b", &b, MapShape::new(256, 8, 8)).is_err());
    }

    #[test]
    fn small_image_lr_stem_keeps_resolution() {
        let p = plan_network(&Preset::Lr26.spec().small_image(10)).unwrap();
        assert_eq!(p.stem_output(), MapShape::new(64, 32, 32));
        let hw: Vec<usize> = p.stage_outputs().iter().map(|s| s.h).collect();
        assert_eq!(hw, vec![32, 16, 8, 4]);
    }
}
