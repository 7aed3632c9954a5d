//! Flat `key=value` run configuration covering the model shape, the
//! training plan and decoding length.
//!
//! Blank lines and lines starting with `#` are skipped. Unknown keys are
//! rejected. `vocab_size`, `feature_dim` and `num_regions` are normally
//! taken from the data; when set here they must agree with it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::generation::GenerationConfig;
use crate::model::ModelConfig;
use crate::numerics::AdamConfig;
use crate::training::{StagePlan, TrainingStage};

/// Keys that tune training; model keys are `ModelConfig::KEYS`.
pub const TRAINING_KEYS: [&str; 10] = [
    "epochs",
    "batch_size",
    "base_lr",
    "warmup_fraction",
    "beta1",
    "beta2",
    "adam_epsilon",
    "clip_norm",
    "dropout",
    "max_steps",
];

pub const GENERATION_KEYS: [&str; 1] = ["max_length"];

/// Model fields that describe the data rather than the architecture.
pub const DATA_KEYS: [&str; 3] = ["vocab_size", "feature_dim", "num_regions"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub dropout: f64,
    pub max_steps: Option<u64>,
    pub max_length: usize,
    /// Keys given explicitly, so data-derived fields can be checked.
    explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = StagePlan::new(TrainingStage::CaptionOnly, 0);
        Self {
            model: ModelConfig::toy(0),
            epochs: plan.epochs,
            batch_size: plan.batch_size,
            adam: plan.adam,
            clip_norm: plan.clip_norm,
            dropout: plan.dropout,
            max_steps: plan.max_steps,
            max_length: GenerationConfig::DEFAULT_MAX_LENGTH,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}={value} is not a valid value")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            let (k, v) = (k.trim().to_string(), v.trim().to_string());
            if pairs.insert(k.clone(), v).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("key {k} given twice"),
                });
            }
        }
        Self::from_pairs(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            let known = ModelConfig::KEYS.contains(&k.as_str())
                || TRAINING_KEYS.contains(&k.as_str())
                || GENERATION_KEYS.contains(&k.as_str());
            if !known {
                return Err(Error::Config(format!("unknown config key {k}")));
            }
            match k.as_str() {
                "epochs" => cfg.epochs = parse_num(k, v)?,
                "batch_size" => cfg.batch_size = parse_num(k, v)?,
                "base_lr" => cfg.adam.base_lr = parse_num(k, v)?,
                "warmup_fraction" => cfg.adam.warmup_fraction = parse_num(k, v)?,
                "beta1" => cfg.adam.beta1 = parse_num(k, v)?,
                "beta2" => cfg.adam.beta2 = parse_num(k, v)?,
                "adam_epsilon" => cfg.adam.epsilon = parse_num(k, v)?,
                "clip_norm" => cfg.clip_norm = parse_num(k, v)?,
                "dropout" => cfg.dropout = parse_num(k, v)?,
                "max_steps" => {
                    cfg.max_steps = if v == "none" { None } else { Some(parse_num(k, v)?) }
                }
                "max_length" => cfg.max_length = parse_num(k, v)?,
                _ => {}
            }
            cfg.explicit.insert(k.clone());
        }
        cfg.model.apply_pairs(pairs)?;
        cfg.check()?;
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.max_length == 0 {
            return Err(Error::Config("epochs, batch_size and max_length must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.adam.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction {} outside [0, 1]",
                self.adam.warmup_fraction
            )));
        }
        if !(self.adam.base_lr > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("base_lr and clip_norm must be positive".into()));
        }
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Model shape for data with the given vocabulary and region sizes.
    pub fn resolve_model(
        &self,
        vocab_size: usize,
        feature_dim: usize,
        num_regions: usize,
    ) -> Result<ModelConfig> {
        let mut m = self.model.clone();
        for (key, slot, data) in [
            ("vocab_size", &mut m.vocab_size, vocab_size),
            ("feature_dim", &mut m.feature_dim, feature_dim),
            ("num_regions", &mut m.num_regions, num_regions),
        ] {
            if self.is_explicit(key) && *slot != data {
                return Err(Error::Dimension(format!("config sets {key}={slot} but the data has {data}")));
            }
            *slot = data;
        }
        m.validate()?;
        Ok(m)
    }

    pub fn plan(&self, stage: TrainingStage, seed: u64) -> StagePlan {
        StagePlan {
            stage,
            epochs: self.epochs,
            batch_size: self.batch_size,
            adam: self.adam,
            clip_norm: self.clip_norm,
            dropout: self.dropout,
            seed,
            max_steps: self.max_steps,
        }
    }

    /// Training and decoding fields as `key=value` pairs.
    pub fn run_pairs(&self) -> Vec<(String, String)> {
        let a = &self.adam;
        let v = [
            self.epochs.to_string(),
            self.batch_size.to_string(),
            a.base_lr.to_string(),
            a.warmup_fraction.to_string(),
            a.beta1.to_string(),
            a.beta2.to_string(),
            a.epsilon.to_string(),
            self.clip_norm.to_string(),
            self.dropout.to_string(),
            self.max_steps.map_or("none".into(), |s| s.to_string()),
        ];
        TRAINING_KEYS
            .iter()
            .map(|k| k.to_string())
            .zip(v)
            .chain([("max_length".to_string(), self.max_length.to_string())])
            .collect()
    }

    /// Every field with `model` in place of the configured shape, one
    /// `key=value` per line. Parsing the result gives back the same values.
    pub fn render(&self, model: &ModelConfig) -> String {
        model
            .to_pairs()
            .into_iter()
            .chain(self.run_pairs())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}
