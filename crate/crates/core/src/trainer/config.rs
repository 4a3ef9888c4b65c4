use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::PackingMode;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objective::{AlignmentLoss, DEFAULT_TEMPERATURE};

use super::optim::AdamWHyper;

/// Optimization and objective settings. Defaults follow the reference
/// fine-tuning recipe; small from-scratch models need explicit overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mask_prob: f64,
    pub lambda: f64,
    pub mode: PackingMode,
    pub alignment_loss: AlignmentLoss,
    pub temperature: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-5,
            weight_decay: 0.01,
            warmup_steps: 500,
            batch_size: 16,
            epochs: 10,
            mask_prob: 0.15,
            lambda: 1.0,
            mode: PackingMode::Bilingual,
            alignment_loss: AlignmentLoss::InfoNce,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, why: &str| Err(Error::Config(format!("train.{field} {why}")));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be a finite non-negative number");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail("weight_decay", "must be non-negative");
        }
        if self.batch_size < 2 {
            return fail(
                "batch_size",
                "must be at least 2 (InfoNCE needs in-batch negatives)",
            );
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return fail("mask_prob", "must lie in [0, 1]");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda", "must be a finite non-negative number");
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return fail("temperature", "must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam_beta1/adam_beta2", "must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return fail("adam_eps", "must be positive");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWHyper {
        AdamWHyper {
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

/// Encoder hyperparameters as written in a config file; the vocabulary
/// size comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let d = EncoderConfig::desk(0);
        ModelShape {
            d_model: d.d_model,
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_ff: d.d_ff,
            max_len: d.max_len,
            dropout: d.dropout,
        }
    }
}

impl ModelShape {
    pub fn with_vocab(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_len: self.max_len,
            dropout: self.dropout,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSettings {
    pub path: Option<PathBuf>,
    /// Keep only the first `max_pairs` pairs (data-scale ablations).
    pub max_pairs: Option<usize>,
}

/// The JSON run configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub encoder: ModelShape,
    pub corpus: CorpusSettings,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.encoder.with_vocab(1).validate()
    }
}
