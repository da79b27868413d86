#![allow(dead_code)]

use lrnet::local_relation::{GeoParams, LocalRelationConfig, LocalRelationParams};
use lrnet::model::NetSpec;
use lrnet::model::Preset;
use lrnet::{Shape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-6;
pub const ABS_FLOOR: f64 = 1e-8;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Central differences of `f` with respect to every entry of `x`.
pub fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let v = x.data()[i];
        probe.data_mut()[i] = v + FD_STEP;
        let up = f(&probe);
        probe.data_mut()[i] = v - FD_STEP;
        let down = f(&probe);
        probe.data_mut()[i] = v;
        g.data_mut()[i] = (up - down) / (2.0 * FD_STEP);
    }
    g
}

/// Mixed tolerance: each entry within the absolute floor or within the relative tolerance.
pub fn assert_grad_close(what: &str, analytic: &Tensor<f64>, numeric: &Tensor<f64>) {
    assert_eq!(analytic.shape(), numeric.shape(), "{what}: shape");
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs();
        let scale = a.abs().max(n.abs());
        assert!(
            err <= ABS_FLOOR || err <= REL_TOL * scale,
            "{what}[{i}]: analytic {a} vs numeric {n} (abs {err:e}, rel {:e})",
            err / scale
        );
    }
}

pub fn lr_config(c: usize, k: usize, s: usize, m: usize) -> LocalRelationConfig {
    LocalRelationConfig { channels: c, kernel: k, stride: s, channels_per_group: m, geo_hidden: 4, ..LocalRelationConfig::new(c) }
}

pub fn lr_params<T: lrnet::Element>(cfg: &LocalRelationConfig, seed: u64) -> LocalRelationParams<T> {
    LocalRelationParams::init(cfg, &mut rng(seed)).unwrap()
}

/// Replaces every learned weight with N(0, 0.5²) draws so no path sits at its init value.
pub fn randomize(p: &mut LocalRelationParams<f64>, seed: u64) {
    let mut r = rng(seed);
    let mut fill = |t: &mut Tensor<f64>| *t = Tensor::randn(t.shape(), 0.5, &mut r);
    fill(&mut p.theta_q.weight);
    fill(&mut p.theta_k.weight);
    match &mut p.geo {
        GeoParams::Network { first, second } => {
            fill(&mut first.weight);
            fill(first.bias.as_mut().unwrap());
            fill(&mut second.weight);
            fill(second.bias.as_mut().unwrap());
        }
        GeoParams::Direct(t) => fill(t),
        GeoParams::Off => {}
    }
    if let Some(o) = &mut p.theta_out {
        fill(&mut o.weight);
    }
}

/// Small-image LR-Net-26 layout shrunk to a few channels.
pub fn tiny_spec(preset: Preset, classes: usize, side: usize) -> NetSpec {
    let mut s = preset.spec().small_image(classes);
    s.input_resolution = [side, side];
    s.stage_blocks = [1, 1, 1, 1];
    s.stage_out_channels = if s.block.is_bottleneck() { [16, 16, 32, 32] } else { [8, 8, 16, 16] };
    s.inner_channels = Some([8, 8, 8, 8]);
    s.stem_channels = 8;
    s.lr.kernel = 3;
    s.lr.channels_per_group = 4;
    s.lr.geo_hidden = 4;
    s
}

/// `tiny_spec` widened to 16 channels per stage, the smallest layout that trains reliably.
pub fn trainable_spec(classes: usize) -> NetSpec {
    let mut s = tiny_spec(Preset::Lr26, classes, 8);
    s.stem_channels = 16;
    s.inner_channels = Some([16; 4]);
    s.stage_out_channels = [32; 4];
    s
}

/// Losses over 20 momentum-SGD steps on one fixed batch of 16 patch-smooth blobs (21 values).
pub fn overfit_one_batch(seed: u64) -> Vec<f32> {
    use lrnet::model::NetworkInstance;
    use lrnet::train::{synthetic_blobs, BlobConfig, Sgd};
    let blobs = BlobConfig { classes: 4, side: 8, noise: 1.0, cell: 4, seed };
    let (data, _) = synthetic_blobs(&blobs, 16, 0).unwrap();
    let (x, labels) = data.batch(&(0..data.len()).collect::<Vec<_>>());
    let mut net = NetworkInstance::<f32>::build(&trainable_spec(4), seed).unwrap();
    let mut opt = Sgd::new(0.9, 0.0);
    let mut losses = Vec::new();
    for step in 0..=20 {
        let g = net.batch_grads(&x, &labels).unwrap();
        losses.push(g.loss);
        if step < 20 {
            opt.step(net.params_mut(), &g.grads, 0.01).unwrap();
        }
    }
    losses
}

/// Per-epoch metrics of a 5-epoch style run on i.i.d. separable blobs.
pub fn synthetic_run(epochs: usize, seed: u64) -> Vec<lrnet::train::EpochMetrics> {
    use lrnet::model::NetworkInstance;
    use lrnet::train::{synthetic_blobs, train, BlobConfig, LrSchedule, TrainConfig};
    let blobs = BlobConfig { classes: 4, side: 8, noise: 0.5, cell: 1, seed };
    let (tr, va) = synthetic_blobs(&blobs, 1024, 128).unwrap();
    let mut net = NetworkInstance::build(&trainable_spec(4), seed).unwrap();
    let cfg = TrainConfig {
        epochs,
        batch_size: 32,
        schedule: LrSchedule { base_lr: 0.01, warmup_epochs: 1.0, decay_epochs: vec![], decay_factor: 0.1 },
        seed,
        augment_pad: None,
        ..Default::default()
    };
    train(&mut net, &tr, &va, &cfg, None).unwrap()
}
