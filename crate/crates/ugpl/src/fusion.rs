//! Adaptive fusion of global and local predictions.
//!
//! A scalar global uncertainty (the mean of the normalized map) is
//! concatenated with the global logits and passed through a small sigmoid
//! MLP to produce the fusion weight w_g; fused logits are the convex
//! combination w_g·z_g + (1−w_g)·z_l.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::layers::Linear;
use crate::params::{ParamStore, Scope};
use crate::rng::RngState;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub num_classes: usize,
    pub hidden_dim: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            num_classes: 3,
            hidden_dim: 32,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_dim == 0 {
            return Err("fusion hidden_dim must be at least 1".into());
        }
        if self.num_classes < 2 {
            return Err("num_classes must be at least 2".into());
        }
        Ok(())
    }
}

/// Graph handles from one fusion pass.
#[derive(Debug, Clone, Copy)]
pub struct FusionForward {
    pub weight: Var,
    pub fused_logits: Var,
}

/// Value-level fusion result.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub u_g: f64,
    pub w_g: f64,
    pub fused_logits: Vec<f64>,
}

pub struct FusionNet {
    config: FusionConfig,
    fc1: Linear,
    fc2: Linear,
}

impl FusionNet {
    pub fn new(
        store: &mut ParamStore,
        scope: &Scope,
        config: FusionConfig,
        rng: &mut RngState,
    ) -> Result<Self, TensorError> {
        config.validate().map_err(|reason| TensorError::Domain {
            op: "fusion",
            reason,
        })?;
        Ok(FusionNet {
            fc1: Linear::new(
                store,
                &scope.child("fc1"),
                config.num_classes + 1,
                config.hidden_dim,
                rng,
            ),
            fc2: Linear::new(store, &scope.child("fc2"), config.hidden_dim, 1, rng),
            config,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// w_g = σ(W₂·ReLU(W₁·[z_g, u_g] + b₁) + b₂)
    pub fn weight(
        &self,
        tape: &Tape,
        store: &ParamStore,
        global_logits: Var,
        scalar_uncertainty: Var,
    ) -> Result<Var, TensorError> {
        let c = self.config.num_classes;
        if tape.numel(global_logits) != c || tape.numel(scalar_uncertainty) != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "fusion",
                lhs: vec![c],
                rhs: tape.shape(global_logits),
            });
        }
        let joined = tape.concat(&[global_logits, scalar_uncertainty], 0)?;
        let row = tape.reshape(joined, vec![1, c + 1])?;
        let h = tape.relu(self.fc1.forward(tape, store, row)?);
        let out = self.fc2.forward(tape, store, h)?;
        tape.reshape(tape.sigmoid(out), vec![1])
    }

    /// Full fusion: predict w_g and combine.
    pub fn forward(
        &self,
        tape: &Tape,
        store: &ParamStore,
        global_logits: Var,
        scalar_uncertainty: Var,
        local_logits: Var,
    ) -> Result<FusionForward, TensorError> {
        let weight = self.weight(tape, store, global_logits, scalar_uncertainty)?;
        let fused_logits = fuse_with_weight_graph(tape, global_logits, local_logits, weight)?;
        Ok(FusionForward {
            weight,
            fused_logits,
        })
    }
}

/// w_g·z_g + (1 − w_g)·z_l with an externally supplied weight node.
pub fn fuse_with_weight_graph(
    tape: &Tape,
    global_logits: Var,
    local_logits: Var,
    weight: Var,
) -> Result<Var, TensorError> {
    let one_minus = tape.add_scalar(tape.neg(weight), 1.0);
    let g = tape.mul_scalar_node(global_logits, weight)?;
    let l = tape.mul_scalar_node(local_logits, one_minus)?;
    tape.add(g, l)
}

/// Value-level convex combination.
pub fn fuse_with_weight(global_logits: &[f64], local_logits: &[f64], w_g: f64) -> Vec<f64> {
    global_logits
        .iter()
        .zip(local_logits)
        .map(|(&g, &l)| w_g * g + (1.0 - w_g) * l)
        .collect()
}

/// Mean of the normalized uncertainty map.
pub fn scalar_uncertainty(normalized: &Tensor) -> f64 {
    normalized.data().iter().sum::<f64>() / normalized.numel() as f64
}

/// Graph version of [`scalar_uncertainty`].
pub fn scalar_uncertainty_graph(tape: &Tape, normalized: Var) -> Var {
    tape.mean_all(normalized)
}
