//! End-to-end per-sample pipeline: global forward, Dirichlet uncertainty,
//! patch extraction (per ablation mode), local refinement, adaptive fusion,
//! and assembly of the seven-component loss graph.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::evidential::{
    evidence_to_dirichlet_graph, uncertainty_map_graph, DirichletParams, DirichletVars,
    UncertaintyVars, EPSILON,
};
use crate::fusion::{scalar_uncertainty_graph, FusionConfig, FusionForward, FusionNet};
use crate::global_model::{GlobalModel, GlobalModelConfig};
use crate::layers::Phase;
use crate::local_model::{LocalForward, LocalNet, LocalNetConfig};
use crate::losses::{
    ce_graph, confidence_graph, consistency_graph, correctness_map, diversity_graph, total_graph,
    uncertainty_graph, LossBreakdown, LossWeights,
};
use crate::params::{ParamStore, Scope};
use crate::patch::{
    extract_patches, fixed_grid_coords, patches_at, PatchExtractConfig, PatchSet,
};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Pipeline variants for the component ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    GlobalOnly,
    NoUg,
    FixedPatches,
}

impl AblationMode {
    pub fn all() -> [AblationMode; 4] {
        [
            AblationMode::GlobalOnly,
            AblationMode::NoUg,
            AblationMode::FixedPatches,
            AblationMode::Full,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::GlobalOnly => "global_only",
            AblationMode::NoUg => "no_ug",
            AblationMode::FixedPatches => "fixed_patches",
        }
    }
}

pub struct UgplModel {
    pub global: GlobalModel,
    pub local: LocalNet,
    pub fusion: FusionNet,
    pub patch_cfg: PatchExtractConfig,
}

impl UgplModel {
    pub fn new(
        store: &mut ParamStore,
        global_cfg: GlobalModelConfig,
        local_cfg: LocalNetConfig,
        fusion_cfg: FusionConfig,
        patch_cfg: PatchExtractConfig,
        rng: &mut RngState,
    ) -> Result<Self, TensorError> {
        let global = GlobalModel::new(store, &Scope::root("global"), global_cfg, rng)?;
        let local = LocalNet::new(store, &Scope::root("local"), local_cfg, rng)?;
        let fusion = FusionNet::new(store, &Scope::root("fusion"), fusion_cfg, rng)?;
        Ok(UgplModel {
            global,
            local,
            fusion,
            patch_cfg,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.global.config().num_classes
    }
}

/// Graph handles and extraction metadata from one sample forward.
pub struct SampleForward {
    pub global_logits: Var,
    pub dirichlet: DirichletVars,
    pub umap: UncertaintyVars,
    pub scalar_uncertainty: Var,
    pub patches: Option<PatchSet>,
    pub local: Option<LocalForward>,
    pub fusion: Option<FusionForward>,
}

/// Plain-value prediction bundle for one sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionBundle {
    pub global_logits: Vec<f64>,
    pub patch_logits: Vec<Vec<f64>>,
    pub confidences: Vec<f64>,
    pub local_logits: Vec<f64>,
    pub u_g: f64,
    pub w_g: f64,
    pub fused_logits: Vec<f64>,
    pub patch_coords: Vec<(usize, usize)>,
}

impl PredictionBundle {
    pub fn global_pred(&self) -> usize {
        argmax(&self.global_logits)
    }
    pub fn local_pred(&self) -> usize {
        argmax(&self.local_logits)
    }
    pub fn fused_pred(&self) -> usize {
        argmax(&self.fused_logits)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

impl UgplModel {
    /// Run the pipeline on one (standardized) image. `rng` drives patch
    /// fallback and the random-map ablation; it must be sample-addressed by
    /// the caller for determinism.
    pub fn forward_sample(
        &self,
        tape: &Tape,
        store: &ParamStore,
        image: &Tensor,
        mode: AblationMode,
        phase: Phase,
        rng: &mut RngState,
    ) -> Result<SampleForward, TensorError> {
        let g = self.global.forward(tape, store, image, phase)?;
        let dirichlet = evidence_to_dirichlet_graph(tape, g.evidence, EPSILON)?;
        let umap = uncertainty_map_graph(tape, &dirichlet, EPSILON)?;
        let scalar_u = scalar_uncertainty_graph(tape, umap.normalized);

        if mode == AblationMode::GlobalOnly {
            return Ok(SampleForward {
                global_logits: g.logits,
                dirichlet,
                umap,
                scalar_uncertainty: scalar_u,
                patches: None,
                local: None,
                fusion: None,
            });
        }

        let patches = match mode {
            AblationMode::FixedPatches => {
                let (h, w) = (image.shape()[0], image.shape()[1]);
                let coords =
                    fixed_grid_coords(h, w, self.patch_cfg.patch_size, self.patch_cfg.num_patches);
                patches_at(image, &coords, self.patch_cfg.patch_size)
            }
            AblationMode::NoUg => {
                // uncertainty guidance replaced by a seeded uniform-random map
                let guide = tape.value(umap.normalized);
                let random: Vec<f64> = (0..guide.numel()).map(|_| rng.uniform()).collect();
                let map = Tensor::new(guide.shape().to_vec(), random).unwrap();
                extract_patches(image, &map, &self.patch_cfg, rng)?
            }
            _ => {
                let map = tape.value(umap.normalized);
                extract_patches(image, &map, &self.patch_cfg, rng)?
            }
        };

        let local = self.local.forward(tape, store, &patches, phase)?;
        let fusion = self
            .fusion
            .forward(tape, store, g.logits, scalar_u, local.aggregated)?;
        Ok(SampleForward {
            global_logits: g.logits,
            dirichlet,
            umap,
            scalar_uncertainty: scalar_u,
            patches: Some(patches),
            local: Some(local),
            fusion: Some(fusion),
        })
    }

    /// Eval-mode forward returning plain values. In global-only mode the
    /// local and fused entries mirror the global prediction.
    pub fn predict(
        &self,
        store: &ParamStore,
        image: &Tensor,
        mode: AblationMode,
        rng: &mut RngState,
    ) -> Result<PredictionBundle, TensorError> {
        let tape = Tape::new();
        let fwd = self.forward_sample(&tape, store, image, mode, Phase::Eval, rng)?;
        let global_logits = tape.value(fwd.global_logits).into_data();
        let u_g = tape.item(fwd.scalar_uncertainty);
        Ok(match (&fwd.local, &fwd.fusion) {
            (Some(local), Some(fusion)) => PredictionBundle {
                patch_logits: local
                    .patch_logits
                    .iter()
                    .map(|&v| tape.value(v).into_data())
                    .collect(),
                confidences: local.confidences.iter().map(|&v| tape.item(v)).collect(),
                local_logits: tape.value(local.aggregated).into_data(),
                u_g,
                w_g: tape.item(fusion.weight),
                fused_logits: tape.value(fusion.fused_logits).into_data(),
                patch_coords: fwd.patches.as_ref().map(|p| p.coords.clone()).unwrap_or_default(),
                global_logits,
            },
            _ => PredictionBundle {
                patch_logits: Vec::new(),
                confidences: Vec::new(),
                local_logits: global_logits.clone(),
                u_g,
                w_g: 1.0,
                fused_logits: global_logits.clone(),
                patch_coords: Vec::new(),
                global_logits,
            },
        })
    }
}

/// Build the per-sample loss graph and its value breakdown.
///
/// The full pipeline uses all seven components. The global-only ablation
/// trains on λ_f·CE(z_g) + λ_u·L_uncertainty with the remaining components
/// reported as zero.
pub fn sample_losses(
    tape: &Tape,
    fwd: &SampleForward,
    label: usize,
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown), TensorError> {
    let alpha_values = tape.value(fwd.dirichlet.alpha);
    let cmap = correctness_map(
        &DirichletParams {
            beta: tape.value(fwd.dirichlet.beta),
            nu: tape.value(fwd.dirichlet.nu),
            alpha: alpha_values,
        },
        label,
    );
    let l_uncertainty = uncertainty_graph(tape, fwd.umap.normalized, &cmap)?;

    let (total, components) = match (&fwd.local, &fwd.fusion) {
        (Some(local), Some(fusion)) => {
            let l_fused = ce_graph(tape, fusion.fused_logits, label)?;
            let l_global = ce_graph(tape, fwd.global_logits, label)?;
            let k = local.patch_logits.len();
            let mut local_sum = tape.scalar(0.0);
            for &z in &local.patch_logits {
                local_sum = tape.add(local_sum, ce_graph(tape, z, label)?)?;
            }
            let l_local = tape.scale(local_sum, 1.0 / k as f64);
            let l_consistency =
                consistency_graph(tape, &local.patch_logits, &local.confidences, fwd.global_logits)?;
            let patch_correct: Vec<f64> = local
                .patch_logits
                .iter()
                .map(|&z| {
                    let logits = tape.value(z);
                    if argmax(logits.data()) == label {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect();
            let l_confidence = confidence_graph(tape, &local.confidences, &patch_correct)?;
            let l_diversity = diversity_graph(tape, &local.patch_logits)?;

            let comps = [
                Some(l_fused),
                Some(l_global),
                Some(l_local),
                Some(l_uncertainty),
                Some(l_consistency),
                Some(l_confidence),
                Some(l_diversity),
            ];
            let total = total_graph(tape, comps, weights)?;
            let values = [
                tape.item(l_fused),
                tape.item(l_global),
                tape.item(l_local),
                tape.item(l_uncertainty),
                tape.item(l_consistency),
                tape.item(l_confidence),
                tape.item(l_diversity),
            ];
            (total, values)
        }
        _ => {
            let l_fused = ce_graph(tape, fwd.global_logits, label)?;
            let comps = [
                Some(l_fused),
                None,
                None,
                Some(l_uncertainty),
                None,
                None,
                None,
            ];
            let total = total_graph(tape, comps, weights)?;
            let values = [
                tape.item(l_fused),
                0.0,
                0.0,
                tape.item(l_uncertainty),
                0.0,
                0.0,
                0.0,
            ];
            (total, values)
        }
    };
    Ok((total, LossBreakdown::from_components(components, *weights)))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_model(store: &mut ParamStore, seed: u64) -> UgplModel {
        let mut rng = RngState::with_stream(seed, "init");
        UgplModel::new(
            store,
            GlobalModelConfig {
                input_size: (32, 32),
                num_classes: 3,
                backbone_channels: vec![8, 12, 16],
                downsample_factor: 8,
                feature_dim: 16,
                evidence_hidden: 8,
            },
            LocalNetConfig {
                encoder_channels: [8, 12, 16, 16],
                feature_dim: 16,
                cls_hidden: 8,
                conf_hidden: 8,
                ..LocalNetConfig::default()
            },
            FusionConfig {
                num_classes: 3,
                hidden_dim: 8,
            },
            PatchExtractConfig {
                patch_size: 16,
                num_patches: 2,
                margin: 4,
                ..PatchExtractConfig::default()
            },
            &mut rng,
        )
        .unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        Tensor::new(vec![32, 32, 1], (0..1024).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn full_forward_produces_all_parts() {
        let mut store = ParamStore::new();
        let model = tiny_model(&mut store, 1);
        let mut rng = RngState::with_stream(1, "extract");
        let bundle = model
            .predict(&store, &image(2), AblationMode::Full, &mut rng)
            .unwrap();
        assert_eq!(bundle.global_logits.len(), 3);
        assert_eq!(bundle.patch_logits.len(), 2);
        assert_eq!(bundle.confidences.len(), 2);
        assert!(bundle.w_g > 0.0 && bundle.w_g < 1.0);
        assert!((0.0..=1.0).contains(&bundle.u_g));
        // fused is the convex combination of global and local
        for i in 0..3 {
            let expect = bundle.w_g * bundle.global_logits[i]
                + (1.0 - bundle.w_g) * bundle.local_logits[i];
            assert!((bundle.fused_logits[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn global_only_mirrors_global() {
        let mut store = ParamStore::new();
        let model = tiny_model(&mut store, 3);
        let mut rng = RngState::with_stream(1, "extract");
        let bundle = model
            .predict(&store, &image(4), AblationMode::GlobalOnly, &mut rng)
            .unwrap();
        assert_eq!(bundle.fused_logits, bundle.global_logits);
        assert_eq!(bundle.w_g, 1.0);
        assert!(bundle.patch_logits.is_empty());
    }

    #[test]
    fn fixed_patches_ignore_rng() {
        let mut store = ParamStore::new();
        let model = tiny_model(&mut store, 5);
        let mut r1 = RngState::with_stream(10, "a");
        let mut r2 = RngState::with_stream(99, "b");
        let tape1 = Tape::new();
        let f1 = model
            .forward_sample(&tape1, &store, &image(6), AblationMode::FixedPatches, Phase::Eval, &mut r1)
            .unwrap();
        let tape2 = Tape::new();
        let f2 = model
            .forward_sample(&tape2, &store, &image(6), AblationMode::FixedPatches, Phase::Eval, &mut r2)
            .unwrap();
        assert_eq!(
            f1.patches.as_ref().unwrap().coords,
            f2.patches.as_ref().unwrap().coords
        );
    }

    #[test]
    fn losses_are_finite_and_consistent() {
        let mut store = ParamStore::new();
        let model = tiny_model(&mut store, 7);
        for mode in [AblationMode::Full, AblationMode::GlobalOnly, AblationMode::NoUg] {
            let tape = Tape::new();
            let mut rng = RngState::with_stream(2, "extract");
            let fwd = model
                .forward_sample(&tape, &store, &image(8), mode, Phase::Train, &mut rng)
                .unwrap();
            let (total, breakdown) =
                sample_losses(&tape, &fwd, 1, &LossWeights::default()).unwrap();
            assert!(breakdown.is_finite());
            let dot: f64 = breakdown
                .components()
                .iter()
                .zip(breakdown.weights.as_array())
                .map(|(c, w)| c * w)
                .sum();
            assert!((breakdown.total - dot).abs() < 1e-12);
            assert!((tape.item(total) - breakdown.total).abs() < 1e-10);
            tape.backward(total).unwrap();
        }
    }

    #[test]
    fn zero_weight_component_contributes_zero_gradient() {
        let mut store = ParamStore::new();
        let model = tiny_model(&mut store, 9);
        let grads_with = |weights: LossWeights| {
            let tape = Tape::new();
            let mut rng = RngState::with_stream(3, "extract");
            let fwd = model
                .forward_sample(&tape, &store, &image(10), AblationMode::Full, Phase::Train, &mut rng)
                .unwrap();
            let (total, _) = sample_losses(&tape, &fwd, 0, &weights).unwrap();
            tape.backward(total).unwrap();
            let mut grads = store.zero_grads();
            tape.accumulate_param_grads(&mut grads);
            grads
        };
        // with every weight zero, every gradient is exactly zero
        let zero = LossWeights {
            fused: 0.0,
            global: 0.0,
            local: 0.0,
            uncertainty: 0.0,
            consistency: 0.0,
            confidence: 0.0,
            diversity: 0.0,
        };
        let gz = grads_with(zero);
        assert!(gz.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        // fused-only weights leave the evidence head untouched (it feeds the
        // fused path only through u_g → w_g, so those grads may be nonzero;
        // but uncertainty-only weights must leave the local heads at zero)
        let unc_only = LossWeights {
            uncertainty: 0.3,
            ..zero
        };
        let gu = grads_with(unc_only);
        for id in store.param_ids() {
            let name = store.name(id);
            if name.starts_with("local.cls") || name.starts_with("fusion.") {
                assert!(
                    gu[id.index()].data().iter().all(|&v| v == 0.0),
                    "{name} should have zero grad under uncertainty-only weights"
                );
            }
        }
    }
}
