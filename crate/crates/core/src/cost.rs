//! Parameter and FLOP accounting over layer plans.
//!
//! One multiply-accumulate counts as one FLOP. Convolutions count every tap, padding
//! included. Batch norm, ReLU and pooling are free. Local relation layers count their
//! implemented work exactly: only in-bounds window entries, plus the per-entry scalar
//! operations of the composability term, prior add and softmax.

use std::fmt::Write as _;

use serde::Serialize;

use crate::local_relation::{GeoMode, LocalRelationConfig, Normalization, Variant};
use crate::model::plan::{LayerKind, LayerPlan, MapShape, NetworkPlan};
use crate::model::spec::Preset;

/// Scalar operations per valid window entry spent on softmax (max, subtract, exp, sum, divide).
pub const SOFTMAX_OPS: u64 = 5;

/// Breakdown of one local relation layer's cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LrFlops {
    pub query: u64,
    pub key: u64,
    pub aggregation: u64,
    pub output: u64,
    /// Composability, prior add and softmax over valid window entries, all groups.
    pub scalar: u64,
    /// Order-of-magnitude estimate `((1+s²)/m + 1)·C·(C+k²)·HW/s²`.
    pub formula: f64,
}

impl LrFlops {
    pub fn macs(&self) -> u64 {
        self.query + self.key + self.aggregation + self.output
    }

    pub fn exact(&self) -> u64 {
        self.macs() + self.scalar
    }

    pub fn formula_ratio(&self) -> f64 {
        self.exact() as f64 / self.formula
    }
}

/// Number of in-bounds `(p', Δ)` pairs for one channel.
pub fn valid_pairs(cfg: &LocalRelationConfig, h: usize, w: usize) -> u64 {
    let axis = |len: usize| -> u64 {
        let r = cfg.radius() as isize;
        (0..cfg.out_len(len))
            .map(|p| {
                let a = (p * cfg.stride) as isize;
                (-r..=r).filter(|d| (0..len as isize).contains(&(a + d))).count() as u64
            })
            .sum()
    };
    axis(h) * axis(w)
}

pub fn composability_ops(variant: Variant, d: usize) -> u64 {
    match variant {
        Variant::SquaredDifference | Variant::AbsoluteDifference => 2 * d as u64,
        Variant::Multiplication => d as u64,
    }
}

pub fn lr_layer_flops(cfg: &LocalRelationConfig, h: usize, w: usize) -> LrFlops {
    let c = cfg.channels as u64;
    let qk = cfg.qk_channels() as u64;
    let (oh, ow) = (cfg.out_len(h) as u64, cfg.out_len(w) as u64);
    let hw_out = oh * ow;
    let valid = valid_pairs(cfg, h, w);
    let per_entry = composability_ops(cfg.variant, cfg.qk_dim)
        + u64::from(cfg.geo_mode != GeoMode::Off)
        + if cfg.normalization == Normalization::Softmax { SOFTMAX_OPS } else { 0 };
    let out = if cfg.output_transform { c * cfg.output_channels() as u64 * hw_out } else { 0 };
    let (s, m, k) = (cfg.stride as f64, cfg.channels_per_group as f64, cfg.kernel as f64);
    let cf = cfg.channels as f64;
    LrFlops {
        query: c * qk * hw_out,
        key: c * qk * (h * w) as u64,
        aggregation: c * valid,
        output: out,
        scalar: cfg.groups() as u64 * valid * per_entry,
        formula: ((1.0 + s * s) / m + 1.0) * cf * (cf + k * k) * (h * w) as f64 / (s * s),
    }
}

pub fn lr_layer_params(cfg: &LocalRelationConfig) -> u64 {
    let c = cfg.channels as u64;
    let g = cfg.groups() as u64;
    let hid = cfg.geo_hidden as u64;
    let geo = match cfg.geo_mode {
        GeoMode::Network => 2 * hid + hid + hid * g + g,
        GeoMode::Direct => g * cfg.window() as u64,
        GeoMode::Off => 0,
    };
    let out = if cfg.output_transform { c * cfg.output_channels() as u64 } else { 0 };
    2 * c * cfg.qk_channels() as u64 + geo + out
}

pub fn layer_params(kind: &LayerKind) -> u64 {
    match *kind {
        LayerKind::Conv { in_channels, out_channels, kernel, .. } => (in_channels * out_channels * kernel * kernel) as u64,
        LayerKind::ChannelTransform { in_channels, out_channels, .. } => (in_channels * out_channels) as u64,
        LayerKind::BatchNorm { channels } => 2 * channels as u64,
        LayerKind::LocalRelation(ref cfg) => lr_layer_params(cfg),
        LayerKind::Linear { in_features, out_features } => (in_features * out_features + out_features) as u64,
        LayerKind::Relu | LayerKind::MaxPool | LayerKind::GlobalAvgPool => 0,
    }
}

/// `(exact, mac_only)` FLOPs of a planned layer.
pub fn layer_flops(layer: &LayerPlan) -> (u64, u64) {
    let out = layer.output;
    match layer.kind {
        LayerKind::Conv { in_channels, kernel, .. } => {
            let f = (kernel * kernel * in_channels) as u64 * out.c as u64 * out.plane();
            (f, f)
        }
        LayerKind::ChannelTransform { in_channels, .. } => {
            let f = in_channels as u64 * out.c as u64 * out.plane();
            (f, f)
        }
        LayerKind::LocalRelation(ref cfg) => {
            let f = lr_layer_flops(cfg, layer.input.h, layer.input.w);
            (f.exact(), f.macs())
        }
        LayerKind::Linear { in_features, out_features } => {
            let f = (in_features * out_features) as u64;
            (f, f)
        }
        _ => (0, 0),
    }
}

/// Exact FLOPs summed over a set of layers.
pub fn sum_flops<'a>(layers: impl IntoIterator<Item = &'a LayerPlan>) -> u64 {
    layers.into_iter().map(|l| layer_flops(l).0).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub flops: u64,
    pub macs: u64,
    pub output: MapShape,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LrCheck {
    pub name: String,
    pub exact: u64,
    pub formula: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub network: String,
    pub depth: usize,
    pub inner_widths: [usize; 4],
    pub rows: Vec<CostRow>,
    pub total_params: u64,
    pub total_flops: u64,
    pub total_macs: u64,
    pub lr_checks: Vec<LrCheck>,
}

pub fn network_cost(plan: &NetworkPlan) -> CostReport {
    let mut rows = Vec::new();
    let mut lr_checks = Vec::new();
    for l in plan.layers() {
        let (flops, macs) = layer_flops(l);
        if let LayerKind::LocalRelation(cfg) = &l.kind {
            let f = lr_layer_flops(cfg, l.input.h, l.input.w);
            lr_checks.push(LrCheck { name: l.name.clone(), exact: f.exact(), formula: f.formula, ratio: f.formula_ratio() });
        }
        rows.push(CostRow {
            name: l.name.clone(),
            kind: l.kind.label(),
            params: layer_params(&l.kind),
            flops,
            macs,
            output: l.output,
        });
    }
    CostReport {
        network: plan.spec.name.clone(),
        depth: plan.depth(),
        inner_widths: plan.inner_widths,
        total_params: rows.iter().map(|r| r.params).sum(),
        total_flops: rows.iter().map(|r| r.flops).sum(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        rows,
        lr_checks,
    }
}

impl CostReport {
    pub fn to_text(&self) -> String {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "network {}  depth {}  inner widths {:?}", self.network, self.depth, self.inner_widths);
        let _ = writeln!(s, "{:<w$}  {:<18} {:>12} {:>14} {:>14}  {}", "layer", "kind", "params", "flops", "macs", "output");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<w$}  {:<18} {:>12} {:>14} {:>14}  {}",
                r.name, r.kind, r.params, r.flops, r.macs, r.output
            );
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:<18} {:>12} {:>14} {:>14}",
            "total", "", self.total_params, self.total_flops, self.total_macs
        );
        let _ = writeln!(
            s,
            "params {:.2}M  flops {:.3}G  macs-only {:.3}G",
            self.total_params as f64 / 1e6,
            self.total_flops as f64 / 1e9,
            self.total_macs as f64 / 1e9
        );
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,kind,params,flops,macs,out_c,out_h,out_w\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.name, r.kind, r.params, r.flops, r.macs, r.output.c, r.output.h, r.output.w
            );
        }
        let _ = writeln!(s, "total,,{},{},{},,,", self.total_params, self.total_flops, self.total_macs);
        s
    }
}

/// Published size of a standard 224×224 network.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PublishedTarget {
    pub params: f64,
    pub flops: f64,
    pub params_tol: f64,
    pub flops_tol: f64,
}

pub fn published_target(preset: Preset) -> Option<PublishedTarget> {
    let t = |params, flops| PublishedTarget { params, flops, params_tol: 0.03, flops_tol: 0.05 };
    match preset {
        Preset::ResNet50 => Some(t(25.5e6, 4.3e9)),
        Preset::Lr50 => Some(t(23.3e6, 4.3e9)),
        Preset::ResNet26 => Some(t(16.0e6, 2.6e9)),
        Preset::Lr26 => Some(t(14.7e6, 2.6e9)),
        // Widths for this one are not published.
        Preset::Lr18 => Some(PublishedTarget { params: 14.4e6, flops: 2.5e9, params_tol: 0.10, flops_tol: 0.10 }),
        Preset::ResNet18 => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetCheck {
    pub params_rel: f64,
    pub flops_rel: f64,
    pub params_ok: bool,
    pub flops_ok: bool,
}

impl TargetCheck {
    pub fn passed(&self) -> bool {
        self.params_ok && self.flops_ok
    }
}

pub fn check_target(report: &CostReport, t: &PublishedTarget) -> TargetCheck {
    let params_rel = report.total_params as f64 / t.params - 1.0;
    let flops_rel = report.total_flops as f64 / t.flops - 1.0;
    TargetCheck {
        params_rel,
        flops_rel,
        params_ok: params_rel.abs() <= t.params_tol,
        flops_ok: flops_rel.abs() <= t.flops_tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(c: usize, k: usize, m: usize, s: usize) -> LocalRelationConfig {
        LocalRelationConfig { channels: c, kernel: k, channels_per_group: m, stride: s, ..Default::default() }
    }

    #[test]
    fn valid_pairs_matches_enumeration() {
        let c = cfg(8, 5, 8, 2);
        let mut n = 0;
        for ph in 0..c.out_len(7) {
            for pw in 0..c.out_len(6) {
                for dy in -2isize..=2 {
                    for dx in -2isize..=2 {
                        let (y, x) = ((ph * 2) as isize + dy, (pw * 2) as isize + dx);
                        if (0..7).contains(&y) && (0..6).contains(&x) {
                            n += 1;
                        }
                    }
                }
            }
        }
        assert_eq!(valid_pairs(&c, 7, 6), n);
    }

    #[test]
    fn formula_plug_in() {
        let f = lr_layer_flops(&cfg(64, 7, 8, 1), 56, 56);
        let expect = (2.0 / 8.0 + 1.0) * 64.0 * (64.0 + 49.0) * 3136.0;
        assert!((f.formula - expect).abs() < 1e-6);
        assert!(f.formula_ratio() > 0.5 && f.formula_ratio() < 2.0);
    }

    #[test]
    fn k1_degenerate_is_two_transforms() {
        let c = LocalRelationConfig { geo_mode: GeoMode::Off, ..cfg(16, 1, 1, 1) };
        let f = lr_layer_flops(&c, 4, 4);
        assert_eq!(f.query + f.key, 2 * 16 * 16 * 16);
        assert_eq!(f.aggregation, 16 * 16);
    }
}
