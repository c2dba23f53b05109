//! Run configuration: a single JSON document with strict (unknown-key
//! rejecting) parsing and cross-field consistency checks.

use std::path::Path;

use thiserror::Error;

use crate::masking::{MaskConfig, MaskStrategy};
use crate::model::ModelConfig;
use crate::momentum::MomentumConfig;
use crate::sampler::GroupingConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config invalid: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItcConfig {
    pub tau_init: f64,
}

impl Default for ItcConfig {
    fn default() -> Self {
        ItcConfig { tau_init: 0.04 }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Peak learning rate; linear warmup reaches it after `warmup_steps`,
    /// then cosine decay lowers it toward `final_lr_frac` of the peak.
    pub lr: f64,
    #[serde(default = "default_warmup_steps")]
    pub warmup_steps: usize,
    /// Fraction of the peak rate the cosine decay ends at; 1.0 keeps the
    /// rate constant after warmup.
    #[serde(default = "default_final_lr_frac")]
    pub final_lr_frac: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

fn default_warmup_steps() -> usize {
    30
}

fn default_final_lr_frac() -> f64 {
    0.3
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 4.5e-3,
            warmup_steps: default_warmup_steps(),
            final_lr_frac: default_final_lr_frac(),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub grouping: GroupingConfig,
    #[serde(default)]
    pub momentum: MomentumConfig,
    #[serde(default)]
    pub itc: ItcConfig,
    #[serde(default)]
    pub optimizer: OptimConfig,
    pub epochs: usize,
    pub seed: u64,
    pub masking_text: MaskStrategy,
    pub masking_image: MaskStrategy,
    pub out_dir: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            mask: MaskConfig::default(),
            grouping: GroupingConfig::default(),
            momentum: MomentumConfig::default(),
            itc: ItcConfig::default(),
            optimizer: OptimConfig::default(),
            epochs: 5,
            seed: 1,
            masking_text: MaskStrategy::Attentional,
            masking_image: MaskStrategy::Attentional,
            out_dir: "out".into(),
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(ConfigError::Invalid)?;
        self.grouping
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.momentum.beta) {
            return Err(ConfigError::Invalid(format!(
                "momentum beta {} outside [0, 1]",
                self.momentum.beta
            )));
        }
        if self.itc.tau_init <= 0.0 {
            return Err(ConfigError::Invalid(format!("tau_init {} must be > 0", self.itc.tau_init)));
        }
        if self.momentum.queue_size < self.grouping.batch_size {
            return Err(ConfigError::Invalid(format!(
                "feature queue size {} smaller than batch size {}",
                self.momentum.queue_size, self.grouping.batch_size
            )));
        }
        for (name, r) in [("r_text", self.mask.r_text), ("r_image", self.mask.r_image)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(ConfigError::Invalid(format!("{name} {r} outside [0, 1]")));
            }
        }
        if self.mask.pool_factor < 1.0 {
            return Err(ConfigError::Invalid(format!(
                "pool_factor {} must be >= 1",
                self.mask.pool_factor
            )));
        }
        let k_img = self.mask.k_for(self.mask.r_image, self.model.n_patches());
        if k_img == 0 {
            return Err(ConfigError::Invalid(
                "r_image yields an empty image mask; training needs at least one masked patch"
                    .into(),
            ));
        }
        if self.mask.k_for(self.mask.r_text, self.model.text_len) == 0 {
            return Err(ConfigError::Invalid(
                "r_text yields an empty text mask; training needs at least one masked token".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be >= 1".into()));
        }
        Ok(())
    }
}
