//! Datasets: CIFAR-10 binary reader/writer, synthetic Gaussian blobs, augmentation
//! and a bounded prefetching batch loader.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;

/// Per-channel standardization applied after scaling to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

pub const CIFAR_NORMALIZATION: Normalization =
    Normalization { mean: [0.4914, 0.4822, 0.4465], std: [0.2470, 0.2435, 0.2616] };

/// In-memory labelled images, `(N, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().n != labels.len() {
            return Err(Error::Format(format!("{} images but {} labels", images.shape().n, labels.len())));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!("label {l} outside [0, {num_classes})")));
        }
        Ok(Self { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let s = self.images.shape();
        let images = Tensor::from_vec(Shape::new(n, s.c, s.h, s.w), self.images.data()[..n * s.sample()].to_vec())
            .expect("prefix shape");
        Self { images, labels: self.labels[..n].to_vec(), num_classes: self.num_classes }
    }

    /// Gathers `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * s.sample());
        for &i in indices {
            data.extend_from_slice(self.images.sample(i));
        }
        let x = Tensor::from_vec(Shape::new(indices.len(), s.c, s.h, s.w), data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Parses CIFAR-10 binary records (label byte then 3072 CHW pixel bytes).
pub fn parse_cifar10(bytes: &[u8], norm: &Normalization) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(Error::Format(format!("record {r}: label {label} > 9")));
        }
        labels.push(label);
        for (i, &p) in rec[1..].iter().enumerate() {
            let c = i / plane;
            data.push((p as f32 / 255.0 - norm.mean[c]) / norm.std[c]);
        }
    }
    let images = Tensor::from_vec(Shape::new(n, 3, CIFAR_SIDE, CIFAR_SIDE), data)?;
    Dataset::new(images, labels, CIFAR_CLASSES)
}

pub fn load_cifar10(path: &Path, norm: &Normalization) -> Result<Dataset> {
    parse_cifar10(&fs::read(path)?, norm)
}

/// Serializes raw `u8` images (`N × 3072`, CHW) and labels in the CIFAR-10 layout.
pub fn encode_cifar10(pixels: &[u8], labels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != labels.len() * CIFAR_PIXELS {
        return Err(Error::Format("pixel buffer does not match label count".into()));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (l, img) in labels.iter().zip(pixels.chunks_exact(CIFAR_PIXELS)) {
        out.push(*l);
        out.extend_from_slice(img);
    }
    Ok(out)
}

pub fn write_cifar10(path: &Path, pixels: &[u8], labels: &[u8]) -> Result<()> {
    fs::write(path, encode_cifar10(pixels, labels)?)?;
    Ok(())
}

/// Standard file names inside an extracted `cifar-10-batches-bin` directory.
pub fn cifar10_files(dir: &Path) -> (Vec<PathBuf>, PathBuf) {
    let train = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    (train, dir.join("test_batch.bin"))
}

/// Training batches (concatenated) and the test batch from a CIFAR-10 directory.
pub fn load_cifar10_dir(dir: &Path, norm: &Normalization) -> Result<(Dataset, Dataset)> {
    let (train_files, test_file) = cifar10_files(dir);
    let mut bytes = Vec::new();
    for f in &train_files {
        bytes.extend(fs::read(f).map_err(|e| Error::Format(format!("{}: {e}", f.display())))?);
    }
    let test = fs::read(&test_file).map_err(|e| Error::Format(format!("{}: {e}", test_file.display())))?;
    Ok((parse_cifar10(&bytes, norm)?, parse_cifar10(&test, norm)?))
}

/// Gaussian blobs around per-class random prototype images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlobConfig {
    pub classes: usize,
    pub side: usize,
    /// Noise standard deviation relative to unit-variance prototypes.
    pub noise: f64,
    /// Prototypes are constant over `cell × cell` patches; 1 gives i.i.d. pixels.
    pub cell: usize,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self { classes: 4, side: 8, noise: 0.5, cell: 1, seed: 0 }
    }
}

/// `(train, val)` drawn around the same prototypes.
pub fn synthetic_blobs(cfg: &BlobConfig, n_train: usize, n_val: usize) -> Result<(Dataset, Dataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let dims = 3 * cfg.side * cfg.side;
    let cell = cfg.cell.max(1);
    let g = cfg.side.div_ceil(cell);
    let protos: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let coarse: Vec<f64> = (0..3 * g * g).map(|_| StandardNormal.sample(&mut rng)).collect();
            (0..dims)
                .map(|i| {
                    let (c, h, w) = (i / (cfg.side * cfg.side), i / cfg.side % cfg.side, i % cfg.side);
                    coarse[(c * g + h / cell) * g + w / cell]
                })
                .collect()
        })
        .collect();
    let mut draw = |n: usize| -> Result<Dataset> {
        let mut data = Vec::with_capacity(n * dims);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let l = i % cfg.classes;
            labels.push(l);
            for &p in &protos[l] {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push((p + cfg.noise * e) as f32);
            }
        }
        let images = Tensor::from_vec(Shape::new(n, 3, cfg.side, cfg.side), data)?;
        Dataset::new(images, labels, cfg.classes)
    };
    let train = draw(n_train)?;
    let val = draw(n_val)?;
    Ok((train, val))
}

/// Zero-padded random crop of `pad` pixels, then horizontal flip with probability ½.
pub fn augment_in_place<R: Rng + ?Sized>(x: &mut Tensor<f32>, pad: usize, rng: &mut R) {
    let s = x.shape();
    let mut buf = vec![0f32; s.plane()];
    for n in 0..s.n {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        for c in 0..s.c {
            let off = s.offset(n, c, 0, 0);
            let plane = &mut x.data_mut()[off..off + s.plane()];
            for h in 0..s.h {
                for w in 0..s.w {
                    let sw = if flip { s.w - 1 - w } else { w } as isize + dx;
                    let sh = h as isize + dy;
                    buf[h * s.w + w] = if sh >= 0 && sh < s.h as isize && sw >= 0 && sw < s.w as isize {
                        plane[sh as usize * s.w + sw as usize]
                    } else {
                        0.0
                    };
                }
            }
            plane.copy_from_slice(&buf);
        }
    }
}

/// Example order for one epoch.
pub fn epoch_order(len: usize, shuffle: bool, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if shuffle {
        idx.shuffle(rng);
    }
    idx
}

pub struct Batch {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Producer thread assembling (and optionally augmenting) batches ahead of compute;
/// at most two finished batches wait in the queue.
pub struct Prefetcher {
    rx: Receiver<Batch>,
    handle: Option<JoinHandle<()>>,
}

pub const PREFETCH_DEPTH: usize = 2;

impl Prefetcher {
    pub fn spawn(data: std::sync::Arc<Dataset>, order: Vec<usize>, batch_size: usize, augment: Option<(usize, u64)>) -> Self {
        let (tx, rx) = sync_channel(PREFETCH_DEPTH);
        let handle = std::thread::spawn(move || {
            let mut rng = augment.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
            for chunk in order.chunks(batch_size.max(1)) {
                let (mut x, labels) = data.batch(chunk);
                if let (Some((pad, _)), Some(r)) = (augment, rng.as_mut()) {
                    augment_in_place(&mut x, pad, r);
                }
                if tx.send(Batch { x, labels }).is_err() {
                    return;
                }
            }
        });
        Self { rx, handle: Some(handle) }
    }
}

impl Iterator for Prefetcher {
    type Item = Batch;
    fn next(&mut self) -> Option<Batch> {
        self.rx.recv().ok()
    }
}

impl Drop for Prefetcher {
    fn drop(&mut self) {
        // Closing the receiver makes a blocked producer's send fail.
        drop(std::mem::replace(&mut self.rx, sync_channel(0).1));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cifar_roundtrip() {
        let labels = [6u8, 0, 9];
        let pixels: Vec<u8> = (0..3 * CIFAR_PIXELS).map(|i| (i * 7 % 256) as u8).collect();
        let bytes = encode_cifar10(&pixels, &labels).unwrap();
        assert_eq!(bytes.len(), 3 * CIFAR_RECORD);
        let d = parse_cifar10(&bytes, &CIFAR_NORMALIZATION).unwrap();
        assert_eq!(d.labels, vec![6, 0, 9]);
        let v = d.images.at(1, 2, 0, 0);
        let raw = pixels[CIFAR_PIXELS + 2 * 1024] as f32 / 255.0;
        assert!((v - (raw - 0.4465) / 0.2616).abs() < 1e-6);
    }

    #[test]
    fn cifar_errors() {
        assert!(parse_cifar10(&[0u8; 100], &CIFAR_NORMALIZATION).is_err());
        let mut rec = vec![0u8; CIFAR_RECORD];
        rec[0] = 10;
        assert!(matches!(parse_cifar10(&rec, &CIFAR_NORMALIZATION), Err(Error::Format(_))));
    }

    #[test]
    fn prefetch_yields_all_batches_in_order() {
        let (d, _) = synthetic_blobs(&BlobConfig::default(), 10, 0).unwrap();
        let d = std::sync::Arc::new(d);
        let batches: Vec<Batch> = Prefetcher::spawn(d.clone(), (0..10).collect(), 4, None).collect();
        assert_eq!(batches.iter().map(|b| b.labels.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(batches[0].x, d.batch(&[0, 1, 2, 3]).0);
    }

    #[test]
    fn zero_pad_augmentation_is_identity_or_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_fn(Shape::new(1, 1, 2, 3), |_, _, h, w| (h * 3 + w) as f32);
        let mut y = x.clone();
        augment_in_place(&mut y, 0, &mut rng);
        let flipped = Tensor::from_fn(Shape::new(1, 1, 2, 3), |_, _, h, w| (h * 3 + 2 - w) as f32);
        assert!(y == x || y == flipped);
    }
}
