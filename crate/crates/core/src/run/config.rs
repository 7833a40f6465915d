//! The single JSON document that drives every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::DatasetSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Learning rate of everything but the stem.
    pub lr: f64,
    /// Learning rate of the convolutional stem.
    pub backbone_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epoch (0-based) from which both rates are multiplied by `lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    /// Images whose gradients are averaged into one update.
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 4e-4, backbone_lr: 4e-4, weight_decay: 1e-4, epochs: 10, lr_drop_epoch: 8, lr_drop_factor: 0.1, batch_size: 1, grad_clip: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory receiving every artifact of a run.
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs/default") }
    }
}

impl OutputConfig {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.hvdk")
    }
    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }
    pub fn detections(&self) -> PathBuf {
        self.dir.join("detections.jsonl")
    }
    pub fn attention(&self) -> PathBuf {
        self.dir.join("attention.csv")
    }
    pub fn references(&self) -> PathBuf {
        self.dir.join("references.csv")
    }
    pub fn bench(&self) -> PathBuf {
        self.dir.join("bench_attn.csv")
    }

    /// Creates the directory and checks that it accepts files.
    pub fn ensure_writable(&self) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let probe = self.dir.join(".write_probe");
        std::fs::write(&probe, b"")?;
        std::fs::remove_file(&probe)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub optim: OptimConfig,
    pub output: OutputConfig,
    /// Seeds model initialization, shuffling and dropout.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { model: ModelConfig::default(), data: DatasetSpec::default(), optim: OptimConfig::default(), output: OutputConfig::default(), seed: 0 }
    }
}

/// Sets `path` (dot separated) in a JSON object to `raw`, read as JSON when
/// it parses and as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        if key.is_empty() {
            return Err(Error::Config(format!("override key {path:?} has an empty segment")));
        }
        let obj = node.as_object_mut().ok_or_else(|| Error::Config(format!("{} is not an object", keys[..i].join("."))))?;
        if i + 1 == keys.len() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one segment")
}

impl RunConfig {
    pub fn from_value(doc: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses `text` (empty means all defaults) and applies `overrides` in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Value = if text.trim().is_empty() { Value::Object(Default::default()) } else { serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))? };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        Self::from_value(doc)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::parse(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::Config(format!("model.num_classes {} differs from data.num_classes {}", self.model.num_classes, self.data.num_classes)));
        }
        if self.data.image_size % crate::model::STEM_STRIDE != 0 {
            return Err(Error::Config(format!("data.image_size {} is not a multiple of {}", self.data.image_size, crate::model::STEM_STRIDE)));
        }
        let o = &self.optim;
        if o.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be positive".into()));
        }
        for (k, v) in [("lr", o.lr), ("backbone_lr", o.backbone_lr), ("weight_decay", o.weight_decay), ("lr_drop_factor", o.lr_drop_factor), ("grad_clip", o.grad_clip)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("optim.{k} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Canonical JSON with sorted keys.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }

    /// SHA-256 of [`Self::canonical_json`], lowercase hex.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.canonical_json()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}
