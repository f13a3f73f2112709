use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphio::FeatureScheme;
use crate::model::ModelConfig;
use crate::numcore::AdamConfig;
use crate::sampler::SamplerMethod;

/// Everything that determines a cross-validation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    pub features: FeatureScheme,
    pub sampler: SamplerMethod,
    pub mu: f64,
    pub lambda: f64,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub batch: usize,
    pub lr: f64,
    pub wd: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub repeats: usize,
    pub folds: usize,
    pub val_fraction: f64,
    pub score_gating: bool,
    /// Worker threads; 0 uses every available core. Results do not depend on it.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "MUTAG".into(),
            features: FeatureScheme::default(),
            sampler: SamplerMethod::Rwsv,
            mu: 0.5,
            lambda: 0.5,
            layers: 3,
            heads: 4,
            hidden: 64,
            batch: 64,
            lr: 5e-4,
            wd: 1e-4,
            dropout: 0.3,
            epochs: 200,
            patience: 30,
            seed: 0,
            repeats: 1,
            folds: 10,
            val_fraction: 0.1,
            score_gating: false,
            jobs: 0,
        }
    }
}

/// Keys accepted by [`RunConfig::set`], in documentation order.
pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "features",
    "sampler",
    "mu",
    "lambda",
    "layers",
    "heads",
    "hidden",
    "batch",
    "lr",
    "wd",
    "dropout",
    "epochs",
    "patience",
    "seed",
    "repeats",
    "folds",
    "val_fraction",
    "score_gating",
    "jobs",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

/// Dashes and underscores are interchangeable in keys.
pub fn normalize_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_").to_ascii_lowercase()
}

impl RunConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = normalize_key(key);
        match key.as_str() {
            "dataset" => self.dataset = value.trim().to_string(),
            "features" => self.features = value.trim().parse()?,
            "sampler" => self.sampler = value.trim().parse()?,
            "mu" => self.mu = parse(&key, value)?,
            "lambda" => self.lambda = parse(&key, value)?,
            "layers" => self.layers = parse(&key, value)?,
            "heads" => self.heads = parse(&key, value)?,
            "hidden" => self.hidden = parse(&key, value)?,
            "batch" => self.batch = parse(&key, value)?,
            "lr" => self.lr = parse(&key, value)?,
            "wd" => self.wd = parse(&key, value)?,
            "dropout" => self.dropout = parse(&key, value)?,
            "epochs" => self.epochs = parse(&key, value)?,
            "patience" => self.patience = parse(&key, value)?,
            "seed" => self.seed = parse(&key, value)?,
            "repeats" => self.repeats = parse(&key, value)?,
            "folds" => self.folds = parse(&key, value)?,
            "val_fraction" => self.val_fraction = parse(&key, value)?,
            "score_gating" => self.score_gating = parse_bool(&key, value)?,
            "jobs" => self.jobs = parse(&key, value)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Textual form of one field, as accepted by [`RunConfig::set`].
    pub fn get(&self, key: &str) -> Result<String> {
        let key = normalize_key(key);
        Ok(match key.as_str() {
            "dataset" => self.dataset.clone(),
            "features" => self.features.to_string(),
            "sampler" => self.sampler.to_string(),
            "mu" => self.mu.to_string(),
            "lambda" => self.lambda.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "hidden" => self.hidden.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => self.lr.to_string(),
            "wd" => self.wd.to_string(),
            "dropout" => self.dropout.to_string(),
            "epochs" => self.epochs.to_string(),
            "patience" => self.patience.to_string(),
            "seed" => self.seed.to_string(),
            "repeats" => self.repeats.to_string(),
            "folds" => self.folds.to_string(),
            "val_fraction" => self.val_fraction.to_string(),
            "score_gating" => self.score_gating.to_string(),
            "jobs" => self.jobs.to_string(),
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}`; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        })
    }

    /// Applies a flat `key = value` document. `#` starts a comment; blank
    /// lines are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, found `{line}`",
                    i + 1
                )));
            };
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Renders every key in the `key = value` grammar.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.is_empty() {
            return Err(Error::Config("dataset name is empty".into()));
        }
        if !(1..=4).contains(&self.layers) {
            return Err(Error::Config(format!("layers must be in 1..=4, got {}", self.layers)));
        }
        if self.batch == 0 || self.epochs == 0 || self.repeats == 0 {
            return Err(Error::Config("batch, epochs and repeats must be positive".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be ≥ 2, got {}", self.folds)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.wd >= 0.0 && self.wd.is_finite()) {
            return Err(Error::Config("lr must be positive and wd non-negative".into()));
        }
        // num_classes/in_dim are placeholders here; they come from the dataset.
        self.model_config(1, 2).validate()
    }

    pub fn model_config(&self, in_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            in_dim,
            hidden: self.hidden,
            heads: self.heads,
            layers: self.layers,
            num_classes,
            mu: self.mu,
            lambda: self.lambda,
            sampler: self.sampler,
            dropout: self.dropout,
            score_gating: self.score_gating,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.wd,
            ..AdamConfig::default()
        }
    }
}
