use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::approx::{FeatureMap, Keying, PretrainConfig};
use crate::error::{OpeError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    /// `f(x) = x^2`.
    #[default]
    Square,
}

impl Regularizer {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Regularizer::Square => x * x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Regularizer::Square => 2.0 * x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// One ζ per dialog, taken at its terminal pair.
    #[default]
    TerminalPairs,
    /// Every slot of the padded dialog, pads included, rescaled by `t_max`.
    AllPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KeyingKind {
    #[default]
    History,
    Features,
    LastTurn,
}

impl KeyingKind {
    pub fn build(self, map: FeatureMap) -> Keying {
        match self {
            KeyingKind::History => Keying::History,
            KeyingKind::Features => Keying::Features { map },
            KeyingKind::LastTurn => Keying::LastTurn,
        }
    }
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_width() -> usize {
    64
}

/// Function class for ζ and ν.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Tabular {
        #[serde(default)]
        keying: KeyingKind,
    },
    Linear,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
    },
    /// One trunk with a ζ head and a ν head; optionally warm-started.
    Shared {
        #[serde(default = "default_width")]
        width: usize,
        #[serde(default)]
        pretrain: Option<PretrainConfig>,
    },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Tabular {
            keying: KeyingKind::History,
        }
    }
}

fn d_alpha_zeta() -> f64 {
    1.0
}
fn d_lr() -> f64 {
    2e-4
}
fn d_lambda_mult() -> f64 {
    100.0
}
fn d_nu_mult() -> f64 {
    2.0
}
fn d_clip() -> f64 {
    10.0
}
fn d_steps() -> u64 {
    20_000
}
fn d_batch() -> usize {
    64
}
fn d_warmup() -> u64 {
    1000
}
fn d_one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiceConfig {
    pub t_max: usize,
    #[serde(default = "d_alpha_zeta")]
    pub alpha_zeta: f64,
    #[serde(default)]
    pub alpha_r: f64,
    #[serde(default)]
    pub regularizer: Regularizer,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_lambda_mult")]
    pub lambda_lr_mult: f64,
    #[serde(default = "d_nu_mult")]
    pub nu_lr_mult: f64,
    #[serde(default = "d_clip")]
    pub clip_norm: f64,
    #[serde(default = "d_steps")]
    pub steps: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_warmup")]
    pub warmup: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub normalize: Normalization,
    #[serde(default)]
    pub resample_target_actions: bool,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_one")]
    pub trunk_lr_mult: f64,
    /// Token vocabulary for feature maps; inferred from the data when absent.
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

impl DiceConfig {
    pub fn new(t_max: usize) -> Self {
        serde_json::from_value(serde_json::json!({ "t_max": t_max })).expect("defaults deserialize")
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr", self.lr),
            ("lambda_lr_mult", self.lambda_lr_mult),
            ("nu_lr_mult", self.nu_lr_mult),
            ("trunk_lr_mult", self.trunk_lr_mult),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(OpeError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.alpha_zeta >= 0.0) {
            return Err(OpeError::Config("alpha_zeta must be non-negative".into()));
        }
        if self.t_max == 0 {
            return Err(OpeError::Config("t_max must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(OpeError::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(OpeError::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }

    /// Effective learning rate at 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let w = self.warmup.max(1) as f64;
        self.lr * w.sqrt() / (t.max(self.warmup).max(1) as f64).sqrt()
    }

    /// Hex SHA-256 of the canonical JSON of this config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
