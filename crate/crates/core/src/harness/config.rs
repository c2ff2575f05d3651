//! Experiment configuration and the flat `key = value` config file.
//!
//! Unknown keys are rejected so typos fail loudly instead of silently
//! training with defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::architecture::checkpoint::parse_kv_text;
use crate::architecture::ModelConfig;
use crate::attention::{AttentionConfig, AttentionVariant};
use crate::error::{Error, Result};

/// Learning-rate schedule over epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::config(format!("unknown schedule '{other}'"))),
        }
    }
}

/// Optimizer hyperparameters (momentum SGD).
#[derive(Clone, Debug)]
pub struct OptimizerConfig {
    pub kind: String,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub schedule: Schedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: "sgd".into(),
            lr: 0.1,
            weight_decay: 5e-4,
            momentum: 0.9,
            schedule: Schedule::Cosine,
        }
    }
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DatasetSpec {
    /// Seeded class-conditional synthetic patterns; no files needed.
    Synthetic,
    /// A dataset file (format sniffed from its contents).
    Path(PathBuf),
}

impl DatasetSpec {
    fn parse(s: &str) -> Self {
        if s == "synthetic" {
            DatasetSpec::Synthetic
        } else {
            DatasetSpec::Path(PathBuf::from(s))
        }
    }

    fn render(&self) -> String {
        match self {
            DatasetSpec::Synthetic => "synthetic".into(),
            DatasetSpec::Path(p) => p.display().to_string(),
        }
    }
}

/// Full experiment description.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Validation data; `None` falls back to the synthetic test split (for
    /// synthetic training data) or the training set itself.
    pub val_dataset: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Samples generated when the dataset is synthetic.
    pub synthetic_samples: usize,
    pub synthetic_test_samples: usize,
    /// Stop early once the training accuracy reaches this level.
    pub target_train_acc: Option<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::desk_default(AttentionVariant::A2os2a),
            optimizer: OptimizerConfig::default(),
            epochs: 50,
            batch_size: 32,
            seed: 42,
            dataset: DatasetSpec::Synthetic,
            val_dataset: None,
            out_dir: PathBuf::from("runs"),
            synthetic_samples: 256,
            synthetic_test_samples: 128,
            target_train_acc: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.optimizer.kind != "sgd" {
            return Err(Error::config(format!(
                "unknown optimizer '{}'",
                self.optimizer.kind
            )));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if let Some(acc) = self.target_train_acc {
            if !(0.0..=1.0).contains(&acc) {
                return Err(Error::config("target_train_acc must lie in [0, 1]"));
            }
        }
        if let DatasetSpec::Path(p) = &self.dataset {
            if !p.exists() {
                return Err(Error::config(format!(
                    "dataset path {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(p) = &self.val_dataset {
            if !p.exists() {
                return Err(Error::config(format!(
                    "val_dataset path {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// Parses a config file. Every key is optional; unknown keys error.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_kv_text(&text)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let map = parse_kv_text(text)?;
        Self::from_kv(&map)
    }

    pub fn from_kv(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut variant = cfg.model.attention.variant;
        let mut heads = cfg.model.attention.heads;
        let mut vssa_scale = cfg.model.attention.s;
        for (key, value) in map {
            let v = value.as_str();
            match key.as_str() {
                "variant" => variant = v.parse()?,
                "heads" => heads = parse_num(key, v)?,
                "vssa_scale" => vssa_scale = parse_num(key, v)?,
                "blocks" => cfg.model.blocks = parse_num(key, v)?,
                "embed_dim" => cfg.model.embed_dim = parse_num(key, v)?,
                "timesteps" => cfg.model.timesteps = parse_num(key, v)?,
                "patch_size" => cfg.model.patch_size = parse_num(key, v)?,
                "in_channels" => cfg.model.in_channels = parse_num(key, v)?,
                "image_h" => cfg.model.image_hw.0 = parse_num(key, v)?,
                "image_w" => cfg.model.image_hw.1 = parse_num(key, v)?,
                "num_classes" => cfg.model.num_classes = parse_num(key, v)?,
                "mlp_ratio" => cfg.model.mlp_ratio = parse_num(key, v)?,
                "optimizer" => cfg.optimizer.kind = v.to_string(),
                "lr" => cfg.optimizer.lr = parse_num(key, v)?,
                "weight_decay" => cfg.optimizer.weight_decay = parse_num(key, v)?,
                "momentum" => cfg.optimizer.momentum = parse_num(key, v)?,
                "schedule" => cfg.optimizer.schedule = v.parse()?,
                "epochs" => cfg.epochs = parse_num(key, v)?,
                "batch_size" => cfg.batch_size = parse_num(key, v)?,
                "seed" => cfg.seed = parse_num(key, v)?,
                "dataset" => cfg.dataset = DatasetSpec::parse(v),
                "val_dataset" => cfg.val_dataset = Some(PathBuf::from(v)),
                "out_dir" => cfg.out_dir = PathBuf::from(v),
                "synthetic_samples" => cfg.synthetic_samples = parse_num(key, v)?,
                "synthetic_test_samples" => cfg.synthetic_test_samples = parse_num(key, v)?,
                "target_train_acc" => cfg.target_train_acc = Some(parse_num(key, v)?),
                other => {
                    return Err(Error::config(format!("unknown config key '{other}'")));
                }
            }
        }
        cfg.model.attention = AttentionConfig::new(variant, cfg.model.embed_dim, heads)?;
        cfg.model.attention.s = vssa_scale;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Deterministic rendering, parseable by [`ExperimentConfig::from_kv_text`].
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.model.to_kv_string());
        out.push_str(&format!("optimizer = {}\n", self.optimizer.kind));
        out.push_str(&format!("lr = {}\n", self.optimizer.lr));
        out.push_str(&format!("weight_decay = {}\n", self.optimizer.weight_decay));
        out.push_str(&format!("momentum = {}\n", self.optimizer.momentum));
        out.push_str(&format!(
            "schedule = {}\n",
            match self.optimizer.schedule {
                Schedule::Constant => "constant",
                Schedule::Cosine => "cosine",
            }
        ));
        out.push_str(&format!("epochs = {}\n", self.epochs));
        out.push_str(&format!("batch_size = {}\n", self.batch_size));
        out.push_str(&format!("seed = {}\n", self.seed));
        out.push_str(&format!("dataset = {}\n", self.dataset.render()));
        if let Some(p) = &self.val_dataset {
            out.push_str(&format!("val_dataset = {}\n", p.display()));
        }
        out.push_str(&format!("out_dir = {}\n", self.out_dir.display()));
        out.push_str(&format!("synthetic_samples = {}\n", self.synthetic_samples));
        out.push_str(&format!(
            "synthetic_test_samples = {}\n",
            self.synthetic_test_samples
        ));
        if let Some(acc) = self.target_train_acc {
            out.push_str(&format!("target_train_acc = {acc}\n"));
        }
        out
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("invalid value '{v}' for key '{key}'")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let err = ExperimentConfig::from_kv_text("bogus_key = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn comments_and_defaults() {
        let cfg = ExperimentConfig::from_kv_text("# comment\nembed_dim = 32\nvariant = vssa\n").unwrap();
        assert_eq!(cfg.model.embed_dim, 32);
        assert_eq!(cfg.model.attention.variant, AttentionVariant::Vssa);
        assert_eq!(cfg.epochs, 50);
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.embed_dim = 32;
        cfg.model.attention = AttentionConfig::new(AttentionVariant::Vssa, 32, 2).unwrap();
        cfg.epochs = 7;
        let text = cfg.to_kv_string();
        let back = ExperimentConfig::from_kv_text(&text).unwrap();
        assert_eq!(back.model.embed_dim, 32);
        assert_eq!(back.model.attention.heads, 2);
        assert_eq!(back.epochs, 7);
    }

    #[test]
    fn invalid_combination_rejected() {
        // heads must divide embed_dim
        let err = ExperimentConfig::from_kv_text("embed_dim = 32\nheads = 3\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
