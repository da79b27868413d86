//! Run configuration: built-in defaults, then a JSON config file, then command-line flags.

use std::path::{Path, PathBuf};

use lrnet::local_relation::{GeoMode, LocalRelationConfig, Normalization, Variant};
use lrnet::model::{NetSpec, Preset};
use lrnet::train::{BlobConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Local relation hyper-parameters that may be overridden; strings use the CLI spellings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrOverrides {
    pub kernel: Option<usize>,
    pub channels_per_group: Option<usize>,
    pub variant: Option<String>,
    pub qk_dim: Option<usize>,
    pub geo: Option<String>,
    pub norm: Option<String>,
}

impl LrOverrides {
    pub fn merge(&mut self, other: &LrOverrides) {
        macro_rules! take {
            ($($f:ident),*) => { $( if other.$f.is_some() { self.$f = other.$f.clone(); } )* };
        }
        take!(kernel, channels_per_group, variant, qk_dim, geo, norm);
    }

    pub fn variant(&self) -> Result<Option<Variant>, Failure> {
        self.variant.as_deref().map(str::parse).transpose().map_err(Failure::from)
    }

    pub fn geo(&self) -> Result<Option<GeoMode>, Failure> {
        self.geo.as_deref().map(str::parse).transpose().map_err(Failure::from)
    }

    pub fn norm(&self) -> Result<Option<Normalization>, Failure> {
        self.norm.as_deref().map(str::parse).transpose().map_err(Failure::from)
    }

    pub fn apply(&self, cfg: &mut LocalRelationConfig) -> Result<(), Failure> {
        if let Some(k) = self.kernel {
            cfg.kernel = k;
        }
        if let Some(m) = self.channels_per_group {
            cfg.channels_per_group = m;
        }
        if let Some(d) = self.qk_dim {
            cfg.qk_dim = d;
        }
        if let Some(v) = self.variant()? {
            cfg.variant = v;
        }
        if let Some(g) = self.geo()? {
            cfg.geo_mode = g;
        }
        if let Some(n) = self.norm()? {
            cfg.normalization = n;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Extracted `cifar-10-batches-bin` directory.
    Cifar10 { dir: PathBuf, train_subset: Option<usize>, val_subset: Option<usize> },
    Synthetic { blobs: BlobConfig, n_train: usize, n_val: usize },
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::Synthetic { blobs: BlobConfig::default(), n_train: 512, n_val: 256 }
    }
}

impl DataConfig {
    pub fn classes_and_side(&self) -> (usize, usize) {
        match self {
            Self::Cifar10 { .. } => (10, 32),
            Self::Synthetic { blobs, .. } => (blobs.classes, blobs.side),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: String,
    /// Full network description; takes the place of `model` when present.
    pub spec: Option<NetSpec>,
    /// 32×32-style layout for training and evaluation.
    pub small_image: bool,
    pub lr: LrOverrides,
    pub seed: u64,
    pub workers: Option<usize>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "lr26".into(),
            spec: None,
            small_image: true,
            lr: LrOverrides::default(),
            seed: 0,
            workers: None,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn preset(&self) -> Result<Preset, Failure> {
        self.model.parse().map_err(Failure::from)
    }

    /// Network for training/evaluation on the configured dataset.
    pub fn net_spec(&self) -> Result<NetSpec, Failure> {
        let mut spec = match &self.spec {
            Some(s) => s.clone(),
            None => {
                let (classes, side) = self.data.classes_and_side();
                let mut s = self.preset()?.spec();
                if self.small_image {
                    s = s.small_image(classes);
                    s.input_resolution = [side, side];
                } else {
                    s.num_classes = classes;
                }
                s
            }
        };
        self.lr.apply(&mut spec.lr)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn echo(&self) {
        match serde_json::to_string(self) {
            Ok(s) => eprintln!("effective config: {s}"),
            Err(e) => eprintln!("effective config unavailable: {e}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"model":"lr50","lr":{"kernel":5,"variant":"mul"},"seed":3}"#).unwrap();
        let mut cfg = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(cfg.model, "lr50");
        assert_eq!(cfg.train, TrainConfig::default());
        cfg.lr.merge(&LrOverrides { kernel: Some(3), ..Default::default() });
        assert_eq!(cfg.lr.kernel, Some(3));
        assert_eq!(cfg.lr.variant.as_deref(), Some("mul"));
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"modle":"lr50"}"#).unwrap();
        assert!(matches!(RunConfig::load(Some(&p)), Err(Failure::Usage(_))));
    }
}
