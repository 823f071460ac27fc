//! Local refinement network: a four-block convolutional encoder over
//! extracted patches with parallel classification and confidence heads, and
//! confidence-weighted aggregation of the per-patch logits.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::layers::{Conv2d, BatchNorm2d, Linear, Phase};
use crate::params::{ParamStore, Scope};
use crate::patch::PatchSet;
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalNetConfig {
    pub num_classes: usize,
    pub encoder_channels: [usize; 4],
    pub feature_dim: usize,
    pub cls_hidden: usize,
    pub conf_hidden: usize,
    pub epsilon: f64,
}

impl Default for LocalNetConfig {
    fn default() -> Self {
        LocalNetConfig {
            num_classes: 3,
            encoder_channels: [64, 128, 256, 256],
            feature_dim: 256,
            cls_hidden: 128,
            conf_hidden: 64,
            epsilon: 1e-6,
        }
    }
}

impl LocalNetConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_classes < 2 {
            return Err("num_classes must be at least 2".into());
        }
        if self.encoder_channels.windows(2).any(|w| w[0] > w[1]) {
            return Err("encoder_channels must be monotone non-decreasing".into());
        }
        if self.feature_dim != self.encoder_channels[3] {
            return Err(format!(
                "feature_dim {} must equal the last encoder channel {}",
                self.feature_dim, self.encoder_channels[3]
            ));
        }
        if self.epsilon <= 0.0 {
            return Err("epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Graph handles from a local forward pass over K patches.
pub struct LocalForward {
    /// Per-patch logit rows, each [C].
    pub patch_logits: Vec<Var>,
    /// Per-patch confidence scalars, each a single-element node in (0,1).
    pub confidences: Vec<Var>,
    /// Confidence-weighted aggregate, [C].
    pub aggregated: Var,
}

/// Value-level outputs of [`LocalNet::forward_values`].
#[derive(Debug, Clone)]
pub struct LocalOutput {
    pub patch_logits: Vec<Vec<f64>>,
    pub confidences: Vec<f64>,
    pub aggregated_logits: Vec<f64>,
}

struct EncoderBlock {
    conv: Conv2d,
    bn: BatchNorm2d,
}

pub struct LocalNet {
    config: LocalNetConfig,
    blocks: Vec<EncoderBlock>,
    cls1: Linear,
    cls2: Linear,
    conf1: Linear,
    conf2: Linear,
}

impl LocalNet {
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        config: LocalNetConfig,
        rng: &mut RngState,
    ) -> Result<Self, TensorError> {
        config.validate().map_err(|reason| TensorError::Domain {
            op: "local_net",
            reason,
        })?;
        let mut blocks = Vec::new();
        let mut in_ch = 1;
        for (i, &ch) in config.encoder_channels.iter().enumerate() {
            let s = scope.child(&format!("block{i}"));
            blocks.push(EncoderBlock {
                conv: Conv2d::new(store, &s.child("conv"), in_ch, ch, 3, 1, false, rng),
                bn: BatchNorm2d::new(store, &s.child("bn"), ch),
            });
            in_ch = ch;
        }
        let d = config.feature_dim;
        Ok(LocalNet {
            cls1: Linear::new(store, &scope.child("cls1"), d, config.cls_hidden, rng),
            cls2: Linear::new(store, &scope.child("cls2"), config.cls_hidden, config.num_classes, rng),
            conf1: Linear::new(store, &scope.child("conf1"), d, config.conf_hidden, rng),
            conf2: Linear::new(store, &scope.child("conf2"), config.conf_hidden, 1, rng),
            config,
            blocks,
        })
    }

    pub fn config(&self) -> &LocalNetConfig {
        &self.config
    }

    /// Forward over a batch of K patches (each [P, P, 1], identical P).
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        patches: &PatchSet,
        phase: Phase,
    ) -> Result<LocalForward, TensorError> {
        let k = patches.len();
        if k == 0 {
            return Err(TensorError::Domain {
                op: "local_forward",
                reason: "at least one patch required".into(),
            });
        }
        let p = patches.patches[0].shape()[0];
        if p < 16 {
            return Err(TensorError::Domain {
                op: "local_forward",
                reason: format!(
                    "patch size {p} underflows the four 2x2 pooling stages; the encoder \
                     needs patches of at least 16 pixels"
                ),
            });
        }
        let mut flat = Vec::with_capacity(k * p * p);
        for patch in &patches.patches {
            if patch.shape() != [p, p, 1] {
                return Err(TensorError::ShapeMismatch {
                    op: "local_forward",
                    lhs: vec![p, p, 1],
                    rhs: patch.shape().to_vec(),
                });
            }
            flat.extend_from_slice(patch.data());
        }
        let x = tape.constant(Tensor::new(vec![k, 1, p, p], flat).unwrap());
        let features = self.encode(tape, store, x, phase)?;

        let h1 = tape.relu(self.cls1.forward(tape, store, features)?);
        let logits_mat = self.cls2.forward(tape, store, h1)?;

        let h2 = tape.relu(self.conf1.forward(tape, store, features)?);
        let conf_mat = tape.sigmoid(self.conf2.forward(tape, store, h2)?);

        let c = self.config.num_classes;
        let mut patch_logits = Vec::with_capacity(k);
        let mut confidences = Vec::with_capacity(k);
        for i in 0..k {
            let row = tape.reshape(tape.slice_axis(logits_mat, 0, i, 1)?, vec![c])?;
            patch_logits.push(row);
            let cv = tape.reshape(tape.slice_axis(conf_mat, 0, i, 1)?, vec![1])?;
            confidences.push(cv);
        }
        let aggregated =
            aggregate_local_graph(tape, &patch_logits, &confidences, self.config.epsilon)?;
        Ok(LocalForward {
            patch_logits,
            confidences,
            aggregated,
        })
    }

    fn encode(
        &self,
        tape: &Tape,
        store: &ParamStore,
        mut x: Var,
        phase: Phase,
    ) -> Result<Var, TensorError> {
        for block in &self.blocks {
            x = block.conv.forward(tape, store, x)?;
            x = block.bn.forward(tape, store, x, phase)?;
            x = tape.relu(x);
            x = tape.max_pool2(x)?;
        }
        tape.adaptive_avg_pool_1x1(x)
    }

    /// Eval-mode forward returning plain values.
    pub fn forward_values(
        &self,
        store: &ParamStore,
        patches: &PatchSet,
    ) -> Result<LocalOutput, TensorError> {
        let tape = Tape::new();
        let out = self.forward(&tape, store, patches, Phase::Eval)?;
        Ok(LocalOutput {
            patch_logits: out
                .patch_logits
                .iter()
                .map(|&v| tape.value(v).into_data())
                .collect(),
            confidences: out.confidences.iter().map(|&v| tape.item(v)).collect(),
            aggregated_logits: tape.value(out.aggregated).into_data(),
        })
    }
}

/// Σ c_k·z_k / (Σ c_k + ε) as a graph node.
pub fn aggregate_local_graph(
    tape: &Tape,
    patch_logits: &[Var],
    confidences: &[Var],
    epsilon: f64,
) -> Result<Var, TensorError> {
    debug_assert_eq!(patch_logits.len(), confidences.len());
    let c = tape.numel(patch_logits[0]);
    let mut numerator = tape.constant(Tensor::zeros(vec![c]));
    let mut conf_sum = tape.scalar(0.0);
    for (&z, &conf) in patch_logits.iter().zip(confidences) {
        numerator = tape.add(numerator, tape.mul_scalar_node(z, conf)?)?;
        conf_sum = tape.add(conf_sum, conf)?;
    }
    let denom = tape.add_scalar(conf_sum, epsilon);
    tape.div_scalar_node(numerator, denom)
}

/// Value-level confidence-weighted aggregation.
pub fn aggregate_local(logits: &[Vec<f64>], confidences: &[f64], epsilon: f64) -> Vec<f64> {
    debug_assert_eq!(logits.len(), confidences.len());
    let c = logits[0].len();
    let mut num = vec![0.0; c];
    let mut den = epsilon;
    for (z, &conf) in logits.iter().zip(confidences) {
        for (n, &v) in num.iter_mut().zip(z) {
            *n += conf * v;
        }
        den += conf;
    }
    num.iter().map(|v| v / den).collect()
}
