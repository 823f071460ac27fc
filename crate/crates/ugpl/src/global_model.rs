//! Global classifier: residual backbone over single-channel images with a
//! classification head (GAP → FC) and an evidence head (two 3×3 convs) that
//! expands features to 4C channels per spatial location.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::layers::{Conv2d, ConvBnRelu, Linear, Phase, ResidualBlock};
use crate::params::{ParamStore, Scope};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlobalModelConfig {
    pub input_size: (usize, usize),
    pub num_classes: usize,
    pub backbone_channels: Vec<usize>,
    pub downsample_factor: usize,
    pub feature_dim: usize,
    pub evidence_hidden: usize,
}

impl Default for GlobalModelConfig {
    fn default() -> Self {
        GlobalModelConfig {
            input_size: (64, 64),
            num_classes: 3,
            backbone_channels: vec![16, 32, 64],
            downsample_factor: 8,
            feature_dim: 64,
            evidence_hidden: 32,
        }
    }
}

impl GlobalModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        let (h, w) = self.input_size;
        if self.num_classes < 2 {
            return Err("num_classes must be at least 2".into());
        }
        if self.backbone_channels.is_empty() {
            return Err("backbone_channels must not be empty".into());
        }
        let expected = 1usize << self.backbone_channels.len();
        if self.downsample_factor != expected {
            return Err(format!(
                "downsample_factor {} must be 2^stages = {expected} for {} stages",
                self.downsample_factor,
                self.backbone_channels.len()
            ));
        }
        if h % self.downsample_factor != 0 || w % self.downsample_factor != 0 {
            return Err(format!(
                "input {h}x{w} not divisible by downsample factor {}",
                self.downsample_factor
            ));
        }
        if h / self.downsample_factor < 4 || w / self.downsample_factor < 4 {
            return Err("feature grid must be at least 4x4".into());
        }
        if self.feature_dim != *self.backbone_channels.last().unwrap() {
            return Err(format!(
                "feature_dim {} must equal the last backbone channel {}",
                self.feature_dim,
                self.backbone_channels.last().unwrap()
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.input_size.0 / self.downsample_factor,
            self.input_size.1 / self.downsample_factor,
        )
    }
}

/// Graph handles from one forward pass. Evidence and features are in the
/// [h, w, channels] layout.
#[derive(Debug, Clone, Copy)]
pub struct GlobalForward {
    pub logits: Var,
    pub evidence: Var,
    pub features: Var,
}

/// Value-level outputs of [`GlobalModel::forward_values`].
#[derive(Debug, Clone)]
pub struct GlobalOutput {
    pub logits: Tensor,
    pub evidence: Tensor,
    pub features: Tensor,
}

pub struct GlobalModel {
    config: GlobalModelConfig,
    stem: ConvBnRelu,
    stages: Vec<(ResidualBlock, ResidualBlock)>,
    classifier: Linear,
    evidence_conv1: Conv2d,
    evidence_conv2: Conv2d,
}

impl GlobalModel {
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        config: GlobalModelConfig,
        rng: &mut RngState,
    ) -> Result<Self, TensorError> {
        config.validate().map_err(|reason| TensorError::Domain {
            op: "global_model",
            reason,
        })?;
        let chans = &config.backbone_channels;
        let stem = ConvBnRelu::new(store, &scope.child("stem"), 1, chans[0], 3, 1, rng);
        let mut stages = Vec::new();
        let mut in_ch = chans[0];
        for (i, &ch) in chans.iter().enumerate() {
            let s = scope.child(&format!("stage{i}"));
            let b0 = ResidualBlock::new(store, &s.child("block0"), in_ch, ch, 2, rng);
            let b1 = ResidualBlock::new(store, &s.child("block1"), ch, ch, 1, rng);
            stages.push((b0, b1));
            in_ch = ch;
        }
        let d = config.feature_dim;
        let classifier = Linear::new(store, &scope.child("classifier"), d, config.num_classes, rng);
        let evidence_conv1 = Conv2d::new(
            store,
            &scope.child("evidence_conv1"),
            d,
            config.evidence_hidden,
            3,
            1,
            true,
            rng,
        );
        let evidence_conv2 = Conv2d::new(
            store,
            &scope.child("evidence_conv2"),
            config.evidence_hidden,
            4 * config.num_classes,
            3,
            1,
            true,
            rng,
        );
        Ok(GlobalModel {
            config,
            stem,
            stages,
            classifier,
            evidence_conv1,
            evidence_conv2,
        })
    }

    pub fn config(&self) -> &GlobalModelConfig {
        &self.config
    }

    /// Forward on a single [H, W, 1] image.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        image: &Tensor,
        phase: Phase,
    ) -> Result<GlobalForward, TensorError> {
        let (h, w) = self.config.input_size;
        if image.shape() != [h, w, 1] {
            return Err(TensorError::ShapeMismatch {
                op: "global_forward",
                lhs: vec![h, w, 1],
                rhs: image.shape().to_vec(),
            });
        }
        if !image.all_finite() {
            return Err(TensorError::NonFinite {
                op: "global_forward",
            });
        }
        let x = tape.constant(image.clone());
        let x = tape.reshape(x, vec![1, 1, h, w])?;
        let mut f = self.stem.forward(tape, store, x, phase)?;
        for (b0, b1) in &self.stages {
            f = b0.forward(tape, store, f, phase)?;
            f = b1.forward(tape, store, f, phase)?;
        }
        let (gh, gw) = self.config.grid();
        let d = self.config.feature_dim;
        let c = self.config.num_classes;

        let pooled = tape.global_avg_pool(f)?;
        let logits = tape.reshape(self.classifier.forward(tape, store, pooled)?, vec![c])?;

        let e = self.evidence_conv1.forward(tape, store, f)?;
        let e = tape.relu(e);
        let e = self.evidence_conv2.forward(tape, store, e)?;
        let e = tape.reshape(e, vec![4 * c, gh, gw])?;
        let evidence = tape.permute(e, &[1, 2, 0])?;

        let f_chw = tape.reshape(f, vec![d, gh, gw])?;
        let features = tape.permute(f_chw, &[1, 2, 0])?;

        Ok(GlobalForward {
            logits,
            evidence,
            features,
        })
    }

    /// Eval-mode forward returning plain tensors.
    pub fn forward_values(
        &self,
        store: &ParamStore,
        image: &Tensor,
    ) -> Result<GlobalOutput, TensorError> {
        let tape = Tape::new();
        let out = self.forward(&tape, store, image, Phase::Eval)?;
        Ok(GlobalOutput {
            logits: tape.value(out.logits),
            evidence: tape.value(out.evidence),
            features: tape.value(out.features),
        })
    }
}
