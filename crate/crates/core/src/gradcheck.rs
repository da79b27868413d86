//! Finite-difference checks of the local relation backward pass in 64-bit.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::local_relation::{
    lr_backward, lr_forward, GeoGrads, GeoMode, GeoParams, LocalRelationConfig, LocalRelationGrads,
    LocalRelationParams, Normalization, Variant,
};
use crate::tensor::{Shape, Tensor};

/// Deliberate corruptions of the analytic gradients, used to prove the checker bites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mutation {
    #[default]
    None,
    /// Flip the sign of every prior-parameter gradient.
    NegateThetaG,
    /// Treat ω as a constant: zero the query and key gradients.
    DropQueryKeyPath,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Instances with a |q−k| gap (absdiff) or prior pre-activation below this are redrawn.
    pub kink_margin: f64,
    pub max_redraws: usize,
    pub mutation: Mutation,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-6, abs_floor: 1e-8, kink_margin: 1e-3, max_redraws: 64, mutation: Mutation::None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub len: usize,
    pub max_abs_err: f64,
    /// Largest relative error among entries above the absolute floor.
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude, for telling "all zero" apart.
    pub max_abs_grad: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub label: String,
    pub config: LocalRelationConfig,
    pub input_shape: [usize; 4],
    /// Seed of the instance actually checked (after redraws).
    pub instance_seed: u64,
    pub groups: Vec<GroupReport>,
    pub passed: bool,
}

impl CaseReport {
    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn failing_groups(&self) -> Vec<&str> {
        self.groups.iter().filter(|g| !g.passed).map(|g| g.name.as_str()).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub options: GradCheckOptions,
    pub cases: Vec<CaseReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let o = &self.options;
        let _ = writeln!(s, "gradcheck seed={} step={:e} rel_tol={:e} abs_floor={:e}", self.seed, o.step, o.rel_tol, o.abs_floor);
        for c in &self.cases {
            let [n, ch, h, w] = c.input_shape;
            let _ = write!(s, "{} {} x={n}x{ch}x{h}x{w}", if c.passed { "PASS" } else { "FAIL" }, c.label);
            for g in &c.groups {
                let _ = write!(s, " {}[abs={:.2e} rel={:.2e}]", g.name, g.max_abs_err, g.max_rel_err);
            }
            if !c.passed {
                let _ = write!(s, " failing: {}", c.failing_groups().join(","));
            }
            s.push('\n');
        }
        let failed = self.cases.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "{} of {} configurations passed", self.cases.len() - failed, self.cases.len());
        s
    }
}

pub fn case_label(cfg: &LocalRelationConfig) -> String {
    format!(
        "variant={} stride={} geo={} norm={} k={} m={} d={}",
        cfg.variant.short_name(),
        cfg.stride,
        cfg.geo_mode.short_name(),
        cfg.normalization.short_name(),
        cfg.kernel,
        cfg.channels_per_group,
        cfg.qk_dim
    )
}

/// Small layer used by the default sweep: C=8, k=3, m=4, hidden 4, output transform 8→6.
pub fn default_base_config() -> LocalRelationConfig {
    LocalRelationConfig {
        kernel: 3,
        channels_per_group: 4,
        geo_hidden: 4,
        output_transform: true,
        out_channels: Some(6),
        ..LocalRelationConfig::new(8)
    }
}

pub const DEFAULT_INPUT: Shape = Shape { n: 2, c: 8, h: 6, w: 6 };

/// Every variant × stride {1,2} × geo mode × normalization, on top of `base`.
pub fn sweep_configs(base: &LocalRelationConfig) -> Vec<LocalRelationConfig> {
    let mut out = Vec::new();
    for variant in Variant::ALL {
        for stride in [1, 2] {
            for geo_mode in GeoMode::ALL {
                for normalization in Normalization::ALL {
                    out.push(LocalRelationConfig { variant, stride, geo_mode, normalization, ..*base });
                }
            }
        }
    }
    out
}

fn geo_tensors(geo: &GeoParams<f64>) -> Vec<&Tensor<f64>> {
    match geo {
        GeoParams::Network { first, second } => {
            vec![&first.weight, first.bias.as_ref().unwrap(), &second.weight, second.bias.as_ref().unwrap()]
        }
        GeoParams::Direct(t) => vec![t],
        GeoParams::Off => vec![],
    }
}

fn geo_tensors_mut(geo: &mut GeoParams<f64>) -> Vec<&mut Tensor<f64>> {
    match geo {
        GeoParams::Network { first, second } => {
            vec![&mut first.weight, first.bias.as_mut().unwrap(), &mut second.weight, second.bias.as_mut().unwrap()]
        }
        GeoParams::Direct(t) => vec![t],
        GeoParams::Off => vec![],
    }
}

/// Flattened view of the differentiable inputs, grouped as reported.
fn flatten(x: &Tensor<f64>, p: &LocalRelationParams<f64>) -> Vec<(&'static str, Vec<f64>)> {
    let mut groups = vec![
        ("x", x.data().to_vec()),
        ("theta_q", p.theta_q.weight.data().to_vec()),
        ("theta_k", p.theta_k.weight.data().to_vec()),
    ];
    let geo: Vec<f64> = geo_tensors(&p.geo).iter().flat_map(|t| t.data().iter().copied()).collect();
    if !geo.is_empty() {
        groups.push(("theta_g", geo));
    }
    if let Some(o) = &p.theta_out {
        groups.push(("theta_out", o.weight.data().to_vec()));
    }
    groups
}

fn load(x: &mut Tensor<f64>, p: &mut LocalRelationParams<f64>, name: &str, values: &[f64]) {
    let copy = |t: &mut Tensor<f64>, v: &[f64]| t.data_mut().copy_from_slice(v);
    match name {
        "x" => copy(x, values),
        "theta_q" => copy(&mut p.theta_q.weight, values),
        "theta_k" => copy(&mut p.theta_k.weight, values),
        "theta_out" => copy(&mut p.theta_out.as_mut().unwrap().weight, values),
        "theta_g" => {
            let mut at = 0;
            for t in geo_tensors_mut(&mut p.geo) {
                let n = t.numel();
                copy(t, &values[at..at + n]);
                at += n;
            }
        }
        _ => unreachable!("unknown group {name}"),
    }
}

fn analytic(g: &LocalRelationGrads<f64>, mutation: Mutation) -> Vec<(&'static str, Vec<f64>)> {
    let mut groups = vec![
        ("x", g.grad_x.data().to_vec()),
        ("theta_q", g.theta_q.data().to_vec()),
        ("theta_k", g.theta_k.data().to_vec()),
    ];
    let geo: Vec<f64> = match &g.geo {
        GeoGrads::Network { first_weight, first_bias, second_weight, second_bias } => [first_weight, first_bias, second_weight, second_bias]
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect(),
        GeoGrads::Direct(t) => t.data().to_vec(),
        GeoGrads::Off => vec![],
    };
    if !geo.is_empty() {
        groups.push(("theta_g", geo));
    }
    if let Some(o) = &g.theta_out {
        groups.push(("theta_out", o.data().to_vec()));
    }
    for (name, v) in &mut groups {
        match (mutation, *name) {
            (Mutation::NegateThetaG, "theta_g") => v.iter_mut().for_each(|a| *a = -*a),
            (Mutation::DropQueryKeyPath, "theta_q" | "theta_k") => v.iter_mut().for_each(|a| *a = 0.0),
            _ => {}
        }
    }
    groups
}

/// Random 64-bit instance with every parameter (including the zero-initialized ones) drawn.
pub fn random_instance(
    cfg: &LocalRelationConfig,
    shape: Shape,
    seed: u64,
) -> Result<(Tensor<f64>, LocalRelationParams<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LocalRelationParams::<f64>::init(cfg, &mut rng)?;
    let mut x = Tensor::randn(shape, 1.0, &mut rng);
    for (name, v) in flatten(&x, &p) {
        if name != "x" {
            let t = Tensor::randn(Shape::new(1, 1, 1, v.len()), 0.5, &mut rng);
            load(&mut x, &mut p, name, t.data());
        }
    }
    let (y, _) = lr_forward(&x, &p, cfg)?;
    let r = Tensor::randn(y.shape(), 1.0, &mut rng);
    Ok((x, p, r))
}

/// Smallest distance to a non-differentiable point of the forward map.
fn kink_distance(cfg: &LocalRelationConfig, x: &Tensor<f64>, p: &LocalRelationParams<f64>) -> Result<f64> {
    let mut best = f64::INFINITY;
    if cfg.variant == Variant::AbsoluteDifference {
        let (_, cache) = lr_forward(x, p, cfg)?;
        let (q, k, f) = (&cache.q_map, &cache.k_map, &cache.field);
        let (kk, r, s) = (cfg.kernel, cfg.radius(), cfg.stride);
        let (h, w) = (x.shape().h, x.shape().w);
        for n in 0..q.shape().n {
            for c in 0..q.shape().c {
                for ph in 0..f.out_h {
                    for pw in 0..f.out_w {
                        let qv = q.at(n, c, ph, pw);
                        for ky in 0..kk {
                            for kx in 0..kk {
                                let (yy, xx) = ((ph * s + ky) as isize - r as isize, (pw * s + kx) as isize - r as isize);
                                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                                    best = best.min((qv - k.at(n, c, yy as usize, xx as usize)).abs());
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let GeoParams::Network { first, .. } = &p.geo {
        let (w1, b1) = (first.weight.data(), first.bias.as_ref().unwrap().data());
        let r = cfg.radius() as f64;
        for ky in 0..cfg.kernel {
            for kx in 0..cfg.kernel {
                let (dy, dx) = (ky as f64 - r, kx as f64 - r);
                for j in 0..first.out_channels() {
                    best = best.min((w1[2 * j] * dy + w1[2 * j + 1] * dx + b1[j]).abs());
                }
            }
        }
    }
    Ok(best)
}

fn loss(x: &Tensor<f64>, p: &LocalRelationParams<f64>, r: &Tensor<f64>, cfg: &LocalRelationConfig) -> Result<f64> {
    Ok(lr_forward(x, p, cfg)?.0.dot(r))
}

/// Compares analytic and central-difference gradients of `L = Σ r ⊙ y` for one configuration.
pub fn check_layer(cfg: &LocalRelationConfig, shape: Shape, seed: u64, opts: &GradCheckOptions) -> Result<CaseReport> {
    cfg.validate()?;
    let mut instance_seed = seed;
    let (mut x, mut p, r) = loop {
        let inst = random_instance(cfg, shape, instance_seed)?;
        if kink_distance(cfg, &inst.0, &inst.1)? >= opts.kink_margin || instance_seed - seed >= opts.max_redraws as u64 {
            break inst;
        }
        instance_seed += 1;
    };
    let (_, cache) = lr_forward(&x, &p, cfg)?;
    let grads = analytic(&lr_backward(&r, &cache, &p, cfg)?, opts.mutation);
    let h = opts.step;
    let mut groups = Vec::new();
    for ((name, base), (_, ana)) in flatten(&x, &p).into_iter().zip(grads) {
        let mut vals = base.clone();
        let (mut max_abs, mut max_rel, mut max_grad, mut ok) = (0f64, 0f64, 0f64, true);
        for i in 0..vals.len() {
            vals[i] = base[i] + h;
            load(&mut x, &mut p, name, &vals);
            let up = loss(&x, &p, &r, cfg)?;
            vals[i] = base[i] - h;
            load(&mut x, &mut p, name, &vals);
            let down = loss(&x, &p, &r, cfg)?;
            vals[i] = base[i];
            let num = (up - down) / (2.0 * h);
            let err = (ana[i] - num).abs();
            let scale = ana[i].abs().max(num.abs());
            max_abs = max_abs.max(err);
            max_grad = max_grad.max(ana[i].abs());
            if err > opts.abs_floor {
                max_rel = max_rel.max(err / scale);
                ok &= err <= opts.rel_tol * scale;
            }
        }
        load(&mut x, &mut p, name, &base);
        groups.push(GroupReport {
            name: name.to_string(),
            len: base.len(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
            max_abs_grad: max_grad,
            passed: ok,
        });
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(CaseReport { label: case_label(cfg), config: *cfg, input_shape: shape.dims(), instance_seed, groups, passed })
}

/// Checks each configuration with its own instance seed derived from `seed` and its index.
pub fn run_cases(cases: &[LocalRelationConfig], shape: Shape, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cases = cases
        .iter()
        .enumerate()
        .map(|(i, cfg)| check_layer(cfg, shape, seed.wrapping_mul(1000).wrapping_add(i as u64 * 101), opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport { seed, options: opts.clone(), cases })
}

/// The full variant × stride × geo × normalization sweep on top of `base`.
pub fn run_sweep(base: &LocalRelationConfig, shape: Shape, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    run_cases(&sweep_configs(base), shape, seed, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_has_36_distinct_configs() {
        let cfgs = sweep_configs(&default_base_config());
        assert_eq!(cfgs.len(), 36);
        let labels: std::collections::HashSet<_> = cfgs.iter().map(case_label).collect();
        assert_eq!(labels.len(), 36);
    }

    #[test]
    fn single_case_passes() {
        let cfg = default_base_config();
        let rep = check_layer(&cfg, Shape::new(1, 8, 5, 5), 3, &GradCheckOptions::default()).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert_eq!(rep.groups.iter().map(|g| g.name.as_str()).collect::<Vec<_>>(), ["x", "theta_q", "theta_k", "theta_g", "theta_out"]);
    }

    #[test]
    fn negated_prior_gradient_is_caught() {
        let cfg = LocalRelationConfig { geo_mode: GeoMode::Direct, ..default_base_config() };
        let opts = GradCheckOptions { mutation: Mutation::NegateThetaG, ..Default::default() };
        let rep = check_layer(&cfg, Shape::new(1, 8, 5, 5), 3, &opts).unwrap();
        assert_eq!(rep.failing_groups(), ["theta_g"]);
    }
}
