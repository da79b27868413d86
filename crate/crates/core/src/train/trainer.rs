//! Epoch loop, evaluation, metrics log and per-epoch checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{self, CheckpointMeta};
use super::data::{epoch_order, Dataset, Prefetcher};
use super::optim::{LrSchedule, Sgd};
use crate::error::{Error, Result};
use crate::model::NetworkInstance;
use crate::ops::{argmax_rows, softmax_xent_fwd};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub shuffle: bool,
    /// Random-crop padding; `None` disables crop and flip.
    pub augment_pad: Option<usize>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 128,
            schedule: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            shuffle: true,
            augment_pad: Some(4),
            eval_batch_size: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub val_loss: f64,
    pub val_top1: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_top1,val_loss,val_top1";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", m.epoch, m.lr, m.train_loss, m.train_top1, m.val_loss, m.val_top1);
    }
    s
}

/// Mean loss and top-1 accuracy in inference mode.
pub fn evaluate(net: &NetworkInstance<f32>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let logits = net.forward_eval(&x)?;
        loss += softmax_xent_fwd(&logits, &labels)? as f64 * chunk.len() as f64;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch}.lrnc"))
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    /// Metrics CSV and checkpoints go here when set.
    pub out_dir: Option<&'a Path>,
    rng: ChaCha8Rng,
    opt: Sgd<f32>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, out_dir: Option<&'a Path>) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        let opt = Sgd::new(config.momentum, config.weight_decay);
        Self { config, out_dir, rng, opt }
    }

    fn meta(&self, net: &NetworkInstance<f32>, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            epoch,
            spec_hash: net.spec().hash(),
            rng_seed: self.config.seed,
            rng_word_pos: self.rng.get_word_pos().to_string(),
            spec: net.spec().clone(),
        }
    }

    fn record(&self, net: &NetworkInstance<f32>, rows: &[EpochMetrics]) -> Result<()> {
        if let Some(dir) = self.out_dir {
            fs::create_dir_all(dir)?;
            let epoch = rows.last().map_or(0, |m| m.epoch);
            checkpoint::save(&checkpoint_path(dir, epoch), net, &self.meta(net, epoch))?;
            fs::write(dir.join("metrics.csv"), metrics_csv(rows))?;
        }
        Ok(())
    }

    /// One pass over `data`; returns `(lr of the last step, mean loss, top-1)`.
    pub fn train_epoch(&mut self, net: &mut NetworkInstance<f32>, data: &Arc<Dataset>, epoch: usize) -> Result<(f64, f64, f64)> {
        let cfg = &self.config;
        let mut order = epoch_order(data.len(), cfg.shuffle, &mut self.rng);
        // Batch statistics need two samples.
        if order.len() % cfg.batch_size == 1 {
            order.pop();
        }
        let steps = order.len().div_ceil(cfg.batch_size).max(1);
        let augment = cfg.augment_pad.map(|p| (p, self.rng.next_u64()));
        let loader = Prefetcher::spawn(data.clone(), order, cfg.batch_size, augment);
        let (mut loss_sum, mut correct, mut seen, mut lr) = (0.0, 0usize, 0usize, 0.0);
        for (step, batch) in loader.enumerate() {
            lr = cfg.schedule.lr_at((epoch - 1) as f64 + step as f64 / steps as f64);
            let out = net.batch_grads(&batch.x, &batch.labels)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence { epoch, step });
            }
            self.opt.step(net.params_mut(), &out.grads, lr)?;
            let n = batch.labels.len();
            loss_sum += out.loss as f64 * n as f64;
            correct += out.correct;
            seen += n;
        }
        let seen = seen.max(1) as f64;
        Ok((lr, loss_sum / seen, correct as f64 / seen))
    }

    /// Epoch 0 holds the initial model's metrics; each later row follows one epoch.
    pub fn fit(&mut self, net: &mut NetworkInstance<f32>, train: &Dataset, val: &Dataset) -> Result<Vec<EpochMetrics>> {
        if self.config.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let eval_bs = self.config.eval_batch_size;
        let (train_loss, train_top1) = evaluate(net, train, eval_bs)?;
        let (val_loss, val_top1) = evaluate(net, val, eval_bs)?;
        let mut rows =
            vec![EpochMetrics { epoch: 0, lr: self.config.schedule.lr_at(0.0), train_loss, train_top1, val_loss, val_top1 }];
        self.record(net, &rows)?;
        let data = Arc::new(train.clone());
        for epoch in 1..=self.config.epochs {
            let (lr, train_loss, train_top1) = self.train_epoch(net, &data, epoch)?;
            let (val_loss, val_top1) = evaluate(net, val, eval_bs)?;
            rows.push(EpochMetrics { epoch, lr, train_loss, train_top1, val_loss, val_top1 });
            self.record(net, &rows)?;
        }
        Ok(rows)
    }
}

/// Convenience wrapper around [`Trainer::fit`].
pub fn train(
    net: &mut NetworkInstance<f32>,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<EpochMetrics>> {
    Trainer::new(config.clone(), out_dir).fit(net, train, val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NetSpec, Preset};
    use crate::train::data::{synthetic_blobs, BlobConfig};

    fn tiny() -> NetSpec {
        let mut s = Preset::Lr26.spec().small_image(4);
        s.stage_blocks = [1, 1, 1, 1];
        s.stage_out_channels = [8, 8, 8, 8];
        s.inner_channels = Some([4, 4, 4, 4]);
        s.stem_channels = 4;
        s.input_resolution = [8, 8];
        s.lr.kernel = 3;
        s.lr.channels_per_group = 4;
        s.lr.geo_hidden = 4;
        s
    }

    #[test]
    fn zero_epochs_writes_checkpoint_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (tr, va) = synthetic_blobs(&BlobConfig::default(), 8, 8).unwrap();
        let mut net = NetworkInstance::build(&tiny(), 0).unwrap();
        let cfg = TrainConfig { epochs: 0, batch_size: 4, ..Default::default() };
        let rows = train(&mut net, &tr, &va, &cfg, Some(dir.path())).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(checkpoint_path(dir.path(), 0).exists());
        assert!(!checkpoint_path(dir.path(), 1).exists());
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(csv.starts_with(METRICS_HEADER));
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (tr, va) = synthetic_blobs(&BlobConfig::default(), 8, 4).unwrap();
        let mut net = NetworkInstance::build(&tiny(), 0).unwrap();
        let before: Vec<_> = net.params().iter().map(|p| p.tensor.clone()).collect();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, schedule: LrSchedule::constant(0.0), ..Default::default() };
        train(&mut net, &tr, &va, &cfg, None).unwrap();
        let after: Vec<_> = net.params().iter().map(|p| p.tensor.clone()).collect();
        assert_eq!(before, after);
    }
}
