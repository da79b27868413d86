//! Training harness: optimizer, schedule, datasets, checkpoints and the epoch loop.

pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod trainer;

pub use checkpoint::{load_network, CheckpointMeta};
pub use data::{synthetic_blobs, BlobConfig, Dataset, CIFAR_NORMALIZATION};
pub use optim::{LrSchedule, Sgd};
pub use trainer::{evaluate, metrics_csv, train, EpochMetrics, TrainConfig, Trainer, METRICS_HEADER};
