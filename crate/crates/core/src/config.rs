use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{LiraError, Result};
use crate::vocab::Vocab;

/// Model dimensions. Defaults are the desk-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square global image.
    pub image_size: usize,
    pub patch: usize,
    /// Side of the square local crops fed to the semantic encoder.
    pub local_res: usize,
    pub semantic_dim: usize,
    pub pixel_dim: usize,
    /// Common width D of projected features and the language model.
    pub dim: usize,
    pub heads: usize,
    pub enc_heads: usize,
    pub lm_layers: usize,
    pub enc_blocks: usize,
    pub mlp_ratio: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            patch: 8,
            local_res: 32,
            semantic_dim: 64,
            pixel_dim: 64,
            dim: 64,
            heads: 4,
            enc_heads: 4,
            lm_layers: 2,
            enc_blocks: 2,
            mlp_ratio: 4,
            max_positions: 512,
            vocab_size: Vocab::synthetic().len(),
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 16,
            patch: 4,
            local_res: 8,
            semantic_dim: 6,
            pixel_dim: 5,
            dim: 8,
            heads: 2,
            enc_heads: 1,
            lm_layers: 1,
            enc_blocks: 1,
            mlp_ratio: 2,
            max_positions: 96,
            vocab_size: Vocab::synthetic().len(),
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn global_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn local_tokens(&self) -> usize {
        let g = self.local_res / self.patch;
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(LiraError::invalid(msg.to_string())) };
        check(self.patch > 0, "patch must be positive")?;
        check(self.image_size.is_multiple_of(self.patch), "image_size must be divisible by patch")?;
        check(self.local_res.is_multiple_of(self.patch), "local_res must be divisible by patch")?;
        check(self.local_res >= self.patch, "local_res must be at least one patch")?;
        check(self.heads > 0 && self.dim.is_multiple_of(self.heads), "dim must be divisible by heads")?;
        check(
            self.enc_heads > 0 && self.semantic_dim.is_multiple_of(self.enc_heads) && self.pixel_dim.is_multiple_of(self.enc_heads),
            "encoder widths must be divisible by enc_heads",
        )?;
        check(self.mlp_ratio > 0, "mlp_ratio must be positive")?;
        check(self.vocab_size > crate::vocab::IMAGE_ID, "vocab too small for the special tokens")?;
        check(
            self.max_positions > 2 * self.global_tokens(),
            "max_positions must exceed the global feature length",
        )
    }
}

/// Weights of the combined objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub dice_eps: f64,
    pub ce_weight: f64,
    pub dice_weight: f64,
    pub ce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 1.0,
            dice_eps: 1.0,
            ce_weight: 1.0,
            dice_weight: 1.0,
            ce_clamp: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0 && self.dice_eps > 0.0 && self.ce_clamp > 0.0 && self.ce_clamp < 0.5;
        if !ok {
            return Err(LiraError::invalid("loss config requires alpha >= 0, dice_eps > 0, 0 < ce_clamp < 0.5"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Everything a training or evaluation run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub stage: u8,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub ilvc_enabled: bool,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Optimizer steps; `None` uses the stage default from [`RunConfig::steps`].
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub checkpoint: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub max_generation_steps: usize,
    /// Evaluate samples on worker threads. Training always runs on one.
    pub parallel_eval: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            stage: 2,
            seed: 0,
            data_dir: PathBuf::from("data"),
            ilvc_enabled: true,
            optimizer: OptimizerKind::Adam,
            learning_rate: 2e-3,
            steps: None,
            batch_size: 4,
            checkpoint: PathBuf::from("lira.ckpt"),
            init_checkpoint: None,
            log: None,
            max_generation_steps: 256,
            parallel_eval: false,
        }
    }
}

impl RunConfig {
    /// Stage defaults: 600 steps for stage 1, 1500 for stage 2.
    pub fn steps(&self) -> usize {
        self.steps.unwrap_or(if self.stage == 1 { 600 } else { 1500 })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        if !matches!(self.stage, 1 | 2) {
            return Err(LiraError::invalid(format!("unknown stage {}", self.stage)));
        }
        if self.batch_size == 0 || self.max_generation_steps == 0 {
            return Err(LiraError::invalid("batch_size and max_generation_steps must be positive"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(LiraError::invalid("learning_rate must be positive"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn bad_stage_and_local_res_rejected() {
        let mut c = RunConfig::default();
        c.stage = 3;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.local_res = 30;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_partial_override() {
        let c = RunConfig::from_json(r#"{"stage": 1, "model": {"dim": 32}}"#).unwrap();
        assert_eq!(c.stage, 1);
        assert_eq!(c.model.dim, 32);
        assert_eq!(c.model.patch, 8);
        assert!(RunConfig::from_json(r#"{"stagee": 1}"#).is_err());
    }
}
