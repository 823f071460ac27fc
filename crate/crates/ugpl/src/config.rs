//! Run configuration: one JSON document covering model, patch extraction,
//! loss weights, optimizer and schedule. Every field has a default; unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::RunError;
use crate::fusion::FusionConfig;
use crate::global_model::GlobalModelConfig;
use crate::local_model::LocalNetConfig;
use crate::losses::LossWeights;
use crate::optim::OptimizerConfig;
use crate::patch::PatchExtractConfig;
use crate::pipeline::AblationMode;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub global: GlobalModelConfig,
    pub local: LocalNetConfig,
    pub fusion: FusionConfig,
    pub patch: PatchExtractConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss_weights: LossWeights,
    pub optimizer: OptimizerConfig,
    /// Only cosine decay to zero over `epochs` is supported.
    pub schedule: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub early_stopping_patience: usize,
    pub seed: u64,
    pub ablation: AblationMode,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            schedule: "cosine".to_string(),
            epochs: 30,
            batch_size: 32,
            early_stopping_patience: 7,
            seed: 0,
            ablation: AblationMode::Full,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        let err = |m: String| Err(RunError::Config(m));
        self.model.global.validate().or_else(|e| err(e))?;
        self.model.local.validate().or_else(|e| err(e))?;
        self.model.fusion.validate().or_else(|e| err(e))?;
        self.loss_weights.validate().or_else(|e| err(e))?;
        self.optimizer.validate().or_else(|e| err(e))?;
        if self.schedule != "cosine" {
            return err(format!("unsupported schedule {:?}", self.schedule));
        }
        let c = self.model.global.num_classes;
        if self.model.local.num_classes != c || self.model.fusion.num_classes != c {
            return err(format!(
                "inconsistent class counts: global {c}, local {}, fusion {}",
                self.model.local.num_classes, self.model.fusion.num_classes
            ));
        }
        let (h, w) = self.model.global.input_size;
        let p = self.model.patch.patch_size;
        if p == 0 || p > h.min(w) {
            return err(format!("patch size {p} invalid for {h}x{w} input"));
        }
        if p < 16 {
            return err(format!(
                "patch size {p} underflows the four 2x2 pooling stages of the local \
                 encoder; patches must be at least 16 pixels"
            ));
        }
        if self.model.patch.num_patches == 0 {
            return err("num_patches must be at least 1".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return err("epochs and batch_size must be positive".into());
        }
        if self.early_stopping_patience == 0 {
            return err("early_stopping_patience must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, RunError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| RunError::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&body)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_json_file(&self, path: &Path) -> Result<(), RunError> {
        let body = serde_json::to_string_pretty(self)?;
        std::fs::write(path, body).map_err(|e| RunError::io(path.display().to_string(), e))
    }

    /// `UGPL_SEED` overrides the configured seed.
    pub fn apply_env_seed(&mut self) -> Result<(), RunError> {
        if let Ok(raw) = std::env::var("UGPL_SEED") {
            let seed: u64 = raw
                .parse()
                .map_err(|_| RunError::Config(format!("UGPL_SEED {raw:?} is not a u64")))?;
            self.seed = seed;
        }
        Ok(())
    }
}
