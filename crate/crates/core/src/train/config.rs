use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::optim::AdamConfig;

/// Which embedding initialization to start from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingInit {
    /// `U(±embed_scale)`, followed by the post-embedding LayerNorm.
    #[default]
    SmallUniform,
    /// `N(0, 0.02)`.
    BaselineNormal,
}

/// Per-size learning rates and warmup lengths; warmup is given in units of
/// the 8043 mini-epochs of a full run and rescaled to the step budget.
const LR_PRESETS: [(&str, f64, f64, usize); 6] = [
    ("169m", 6e-4, 1e-5, 361),
    ("430m", 4e-4, 1e-5, 411),
    ("1.5b", 3e-4, 1e-5, 443),
    ("3b", 1.5e-4, 1e-5, 451),
    ("7b", 1.5e-4, 1e-5, 465),
    ("14b", 1e-4, 7e-6, 544),
];
const FULL_RUN_MINI_EPOCHS: usize = 8043;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub init_lr: f64,
    pub end_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub z_coeff: f64,
    pub batch: usize,
    pub ctx: usize,
    pub seed: u64,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub embedding_init: EmbeddingInit,
    /// Write a checkpoint every this many steps (0 disables periodic ones).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset("169m", 2000).expect("known preset")
    }
}

impl TrainConfig {
    /// Schedule of a named size, compressed to `total_steps`.
    pub fn preset(name: &str, total_steps: usize) -> Option<Self> {
        let &(_, init_lr, end_lr, warm) = LR_PRESETS.iter().find(|p| p.0 == name)?;
        let warmup_steps = (total_steps * warm + FULL_RUN_MINI_EPOCHS / 2) / FULL_RUN_MINI_EPOCHS;
        Some(Self {
            init_lr,
            end_lr,
            warmup_steps: warmup_steps.min(total_steps.saturating_sub(1)),
            total_steps,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            z_coeff: 1e-4,
            batch: 1,
            ctx: 256,
            seed: 0,
            grad_clip: None,
            embedding_init: EmbeddingInit::SmallUniform,
            checkpoint_every: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.end_lr > 0.0 && self.end_lr <= self.init_lr && self.init_lr.is_finite()) {
            return bad("need 0 < end_lr <= init_lr");
        }
        if self.total_steps == 0 || self.warmup_steps >= self.total_steps {
            return bad("need warmup_steps < total_steps");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(self.z_coeff >= 0.0 && self.z_coeff.is_finite()) {
            return bad("z_coeff must be finite and >= 0");
        }
        if self.batch == 0 || self.ctx == 0 {
            return bad("batch and ctx must be at least 1");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Missing fields keep their defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        let tc: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        tc.validate()?;
        Ok(tc)
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let tc = TrainConfig::preset("169m", 8043).unwrap();
        assert_eq!((tc.init_lr, tc.end_lr, tc.warmup_steps), (0.0006, 0.00001, 361));
        let tc = TrainConfig::preset("14b", 1000).unwrap();
        assert_eq!((tc.init_lr, tc.end_lr), (1e-4, 7e-6));
        assert!(TrainConfig::preset("1t", 10).is_none());
        assert_eq!((tc.beta1, tc.beta2, tc.adam_eps, tc.z_coeff), (0.9, 0.99, 1e-8, 1e-4));
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn validation() {
        let ok = TrainConfig::default();
        assert!(TrainConfig { end_lr: 1e-3, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { warmup_steps: 2000, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { grad_clip: Some(0.0), ..ok }.validate().is_err());
    }

    #[test]
    fn json_defaults_and_unknown_fields() {
        let tc = TrainConfig::from_json(r#"{"total_steps": 50, "warmup_steps": 5, "embedding_init": "baseline_normal"}"#).unwrap();
        assert_eq!(tc.total_steps, 50);
        assert_eq!(tc.embedding_init, EmbeddingInit::BaselineNormal);
        assert_eq!(tc.ctx, 256);
        assert!(TrainConfig::from_json(r#"{"lr": 1}"#).is_err());
    }
}
