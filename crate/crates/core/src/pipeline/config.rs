use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::AugmentConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::intent::IntentConfig;
use crate::objectives::{AblationMode, LossWeights};
use crate::tensor::AdamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 512,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub mode: AblationMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            mode: AblationMode::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Cut-off of the validation NDCG that drives early stopping.
    pub early_stop_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 20],
            early_stop_k: 20,
        }
    }
}

fn default_epochs() -> usize {
    200
}

fn default_patience() -> usize {
    10
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Prepared dataset directory.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub intent: IntentConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub optim: OptimConfig,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl TrainConfig {
    /// Defaults everywhere except the seed.
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.loss.validate()?;
        self.intent.validate()?;
        self.augment.validate()?;
        if !(self.optim.lr > 0.0) || !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2)
        {
            return Err(Error::Config(
                "optim: lr must be positive and betas must lie in [0,1)".into(),
            ));
        }
        if self.optim.batch_size < 2 {
            return Err(Error::Config("optim.batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be non-empty positive cut-offs".into()));
        }
        if !self.eval.ks.contains(&self.eval.early_stop_k) {
            return Err(Error::Config(format!(
                "eval.early_stop_k ({}) must be one of eval.ks",
                self.eval.early_stop_k
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, excluding paths.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data = None;
        c.output_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("plain struct");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Leading-order operation counts of each training task over a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityBudget {
    pub main: f64,
    pub cluster: f64,
    pub distill: f64,
    pub adversarial: f64,
}

/// Number of head/tail classes seen by the adversary.
pub const ADVERSARY_CLASSES: usize = 2;

impl ComplexityBudget {
    pub fn estimate(config: &TrainConfig, num_users: usize) -> Self {
        let a = config.epochs as f64;
        let u = num_users as f64;
        let l = config.encoder.max_len as f64;
        let d = config.encoder.dim as f64;
        let k = config.intent.k as f64;
        let b = config.optim.batch_size as f64;
        Self {
            main: a * l * l * u * d,
            cluster: a * k * u * d,
            distill: a * b * u * d * d,
            adversarial: a * ADVERSARY_CLASSES as f64 * u * d,
        }
    }

    pub fn dominant(&self) -> f64 {
        self.main + self.distill
    }
}
