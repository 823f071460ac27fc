//! The seven-component training objective.
//!
//! Cross-entropy on fused/global/patch logits, uncertainty-map calibration
//! against the correctness map, confidence-weighted local-global consistency
//! (KL), confidence regression against per-patch correctness, and pairwise
//! cosine diversity of patch predictions. Each component exists twice: as a
//! tape builder used in training, and as a plain-value function used by the
//! CLI and as an independent check of the graph route.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::evidential::{argmax_classes, DirichletParams};
use crate::tensor::Tensor;

/// Component weights λ. Defaults are the balanced baseline
/// (1.0, 0.5, 0.5, 0.3, 0.2, 0.1, 0.1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub fused: f64,
    pub global: f64,
    pub local: f64,
    pub uncertainty: f64,
    pub consistency: f64,
    pub confidence: f64,
    pub diversity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            fused: 1.0,
            global: 0.5,
            local: 0.5,
            uncertainty: 0.3,
            consistency: 0.2,
            confidence: 0.1,
            diversity: 0.1,
        }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 7] {
        [
            self.fused,
            self.global,
            self.local,
            self.uncertainty,
            self.consistency,
            self.confidence,
            self.diversity,
        ]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.as_array().iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err("loss weights must be non-negative and finite".into());
        }
        Ok(())
    }
}

/// Scalar values of all components plus the weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fused: f64,
    pub global: f64,
    pub local: f64,
    pub uncertainty: f64,
    pub consistency: f64,
    pub confidence: f64,
    pub diversity: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    /// Assemble from component values; `total` is exactly the weighted dot
    /// product of the stored components.
    pub fn from_components(components: [f64; 7], weights: LossWeights) -> Self {
        let w = weights.as_array();
        let total = components
            .iter()
            .zip(&w)
            .map(|(c, w)| w * c)
            .sum::<f64>();
        LossBreakdown {
            fused: components[0],
            global: components[1],
            local: components[2],
            uncertainty: components[3],
            consistency: components[4],
            confidence: components[5],
            diversity: components[6],
            total,
            weights,
        }
    }

    pub fn components(&self) -> [f64; 7] {
        [
            self.fused,
            self.global,
            self.local,
            self.uncertainty,
            self.consistency,
            self.confidence,
            self.diversity,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components().iter().all(|c| c.is_finite())
    }
}

/// Binary per-pixel map marking where the evidential argmax matches the
/// image label.
#[derive(Debug, Clone)]
pub struct CorrectnessMap {
    pub values: Tensor,
}

/// C_{i,j} = 1 iff the per-pixel argmax of α (equivalently of α/S) equals
/// the label.
pub fn correctness_map(params: &DirichletParams, label: usize) -> CorrectnessMap {
    let (h, w) = params.grid();
    let classes = argmax_classes(&params.alpha);
    let values: Vec<f64> = classes
        .iter()
        .map(|&c| if c == label { 1.0 } else { 0.0 })
        .collect();
    CorrectnessMap {
        values: Tensor::new(vec![h, w], values).unwrap(),
    }
}

fn check_label(op: &'static str, c: usize, label: usize) -> Result<(), TensorError> {
    if label >= c {
        return Err(TensorError::Domain {
            op,
            reason: format!("label {label} out of range for {c} classes"),
        });
    }
    Ok(())
}

// ---- graph builders ---------------------------------------------------------

/// Cross-entropy of softmax(logits) against a one-hot label, via the stable
/// log-softmax composite.
pub fn ce_graph(tape: &Tape, logits: Var, label: usize) -> Result<Var, TensorError> {
    let c = tape.numel(logits);
    check_label("ce_loss", c, label)?;
    let logp = tape.log_softmax_vec(logits)?;
    let picked = tape.slice_axis(logp, 0, label, 1)?;
    Ok(tape.neg(tape.sum_all(picked)))
}

/// MSE(normalized map, 1 − C).
pub fn uncertainty_graph(
    tape: &Tape,
    normalized: Var,
    cmap: &CorrectnessMap,
) -> Result<Var, TensorError> {
    let shape = tape.shape(normalized);
    if shape != cmap.values.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "uncertainty_loss",
            lhs: shape,
            rhs: cmap.values.shape().to_vec(),
        });
    }
    let target: Vec<f64> = cmap.values.data().iter().map(|&v| 1.0 - v).collect();
    let t = tape.constant(Tensor::new(cmap.values.shape().to_vec(), target).unwrap());
    tape.mse(normalized, t)
}

/// (1/K) Σ_k KL(softmax(z_k) ‖ softmax(z_g)) · c_k
pub fn consistency_graph(
    tape: &Tape,
    patch_logits: &[Var],
    confidences: &[Var],
    global_logits: Var,
) -> Result<Var, TensorError> {
    debug_assert_eq!(patch_logits.len(), confidences.len());
    let logq = tape.log_softmax_vec(global_logits)?;
    let mut acc = tape.scalar(0.0);
    for (&zk, &ck) in patch_logits.iter().zip(confidences) {
        let p = tape.softmax_last(zk)?;
        let logp = tape.log_softmax_vec(zk)?;
        let diff = tape.sub(logp, logq)?;
        let kl = tape.sum_all(tape.mul(p, diff)?);
        let weighted = tape.mul(kl, ck)?;
        acc = tape.add(acc, weighted)?;
    }
    Ok(tape.scale(acc, 1.0 / patch_logits.len() as f64))
}

/// (1/K) Σ_k (c_k − a_k)² with a_k ∈ {0,1} the per-patch correctness.
pub fn confidence_graph(
    tape: &Tape,
    confidences: &[Var],
    correct: &[f64],
) -> Result<Var, TensorError> {
    debug_assert_eq!(confidences.len(), correct.len());
    let mut acc = tape.scalar(0.0);
    for (&ck, &ak) in confidences.iter().zip(correct) {
        let d = tape.add_scalar(ck, -ak);
        acc = tape.add(acc, tape.mul(d, d)?)?;
    }
    Ok(tape.scale(acc, 1.0 / confidences.len() as f64))
}

/// Mean pairwise cosine similarity of softmax probability vectors; zero for
/// fewer than two patches.
pub fn diversity_graph(tape: &Tape, patch_logits: &[Var]) -> Result<Var, TensorError> {
    let k = patch_logits.len();
    if k < 2 {
        return Ok(tape.scalar(0.0));
    }
    let probs: Vec<Var> = patch_logits
        .iter()
        .map(|&z| tape.softmax_last(z))
        .collect::<Result<_, _>>()?;
    let norms: Vec<Var> = probs
        .iter()
        .map(|&p| tape.sqrt(tape.sum_all(tape.mul(p, p)?)))
        .collect::<Result<_, _>>()?;
    let mut acc = tape.scalar(0.0);
    for i in 0..k {
        for j in i + 1..k {
            let dot = tape.sum_all(tape.mul(probs[i], probs[j])?);
            let denom = tape.mul(norms[i], norms[j])?;
            let cos = tape.div_scalar_node(dot, denom)?;
            acc = tape.add(acc, cos)?;
        }
    }
    let pairs = (k * (k - 1) / 2) as f64;
    Ok(tape.scale(acc, 1.0 / pairs))
}

/// Weighted total as a graph node. Components with zero weight contribute no
/// gradient (they are skipped entirely).
pub fn total_graph(
    tape: &Tape,
    components: [Option<Var>; 7],
    weights: &LossWeights,
) -> Result<Var, TensorError> {
    let w = weights.as_array();
    let mut total = tape.scalar(0.0);
    for (component, &weight) in components.iter().zip(&w) {
        if weight == 0.0 {
            continue;
        }
        if let Some(c) = component {
            total = tape.add(total, tape.scale(*c, weight))?;
        }
    }
    Ok(total)
}

// ---- value-level route -------------------------------------------------------

fn softmax_vec(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// −ln softmax(logits)[label]
pub fn ce_loss(logits: &[f64], label: usize) -> Result<f64, TensorError> {
    check_label("ce_loss", logits.len(), label)?;
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln() + m;
    Ok(lse - logits[label])
}

/// MSE between the normalized uncertainty map and 1 − C.
pub fn uncertainty_loss(
    normalized: &Tensor,
    cmap: &CorrectnessMap,
) -> Result<f64, TensorError> {
    if normalized.shape() != cmap.values.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "uncertainty_loss",
            lhs: normalized.shape().to_vec(),
            rhs: cmap.values.shape().to_vec(),
        });
    }
    let n = normalized.numel() as f64;
    Ok(normalized
        .data()
        .iter()
        .zip(cmap.values.data())
        .map(|(&u, &c)| {
            let d = u - (1.0 - c);
            d * d
        })
        .sum::<f64>()
        / n)
}

pub fn consistency_loss(patch_logits: &[Vec<f64>], confidences: &[f64], global_logits: &[f64]) -> f64 {
    let q = softmax_vec(global_logits);
    let k = patch_logits.len();
    patch_logits
        .iter()
        .zip(confidences)
        .map(|(z, &c)| {
            let p = softmax_vec(z);
            let kl: f64 = p
                .iter()
                .zip(&q)
                .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
                .sum();
            kl * c
        })
        .sum::<f64>()
        / k as f64
}

pub fn confidence_loss(
    confidences: &[f64],
    patch_logits: &[Vec<f64>],
    label: usize,
) -> Result<f64, TensorError> {
    check_label("confidence_loss", patch_logits[0].len(), label)?;
    let k = confidences.len();
    Ok(confidences
        .iter()
        .zip(patch_logits)
        .map(|(&c, z)| {
            let a = if argmax(z) == label { 1.0 } else { 0.0 };
            (c - a) * (c - a)
        })
        .sum::<f64>()
        / k as f64)
}

pub fn diversity_loss(patch_logits: &[Vec<f64>]) -> f64 {
    let k = patch_logits.len();
    if k < 2 {
        return 0.0;
    }
    let probs: Vec<Vec<f64>> = patch_logits.iter().map(|z| softmax_vec(z)).collect();
    let norm = |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut acc = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            let dot: f64 = probs[i].iter().zip(&probs[j]).map(|(a, b)| a * b).sum();
            acc += dot / (norm(&probs[i]) * norm(&probs[j]));
        }
    }
    acc / (k * (k - 1) / 2) as f64
}

/// Weighted total over explicit component values.
pub fn total_loss(components: [f64; 7], weights: LossWeights) -> LossBreakdown {
    LossBreakdown::from_components(components, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn ce_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert!((ce_loss(&[0.0, 0.0], 0).unwrap() - ln2).abs() < 1e-12);
        assert!(ce_loss(&[50.0, -50.0], 0).unwrap() < 1e-12);
        // logits [1,0], label 0 → ln(1 + e^{-1}) ≈ 0.3133
        let expect = (1.0 + (-1.0f64).exp()).ln();
        assert!((ce_loss(&[1.0, 0.0], 0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn ce_rejects_bad_label() {
        assert!(ce_loss(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn correctness_map_cases() {
        let p = |nu_rows: Vec<[f64; 2]>| {
            let h = nu_rows.len();
            let alpha: Vec<f64> = nu_rows.iter().flat_map(|r| r.iter().copied()).collect();
            DirichletParams {
                beta: Tensor::full(vec![h, 1, 2], 1.0),
                nu: Tensor::full(vec![h, 1, 2], 0.5),
                alpha: Tensor::new(vec![h, 1, 2], alpha).unwrap(),
            }
        };
        // concentrated on true class everywhere → all ones
        let all_true = p(vec![[5.0, 1.0]; 4]);
        assert!(correctness_map(&all_true, 0)
            .values
            .data()
            .iter()
            .all(|&v| v == 1.0));
        // concentrated on a wrong class everywhere → all zeros
        assert!(correctness_map(&all_true, 1)
            .values
            .data()
            .iter()
            .all(|&v| v == 0.0));
        // mixed 2×2: argmaxes [lbl, other, lbl, lbl]
        let mixed = DirichletParams {
            beta: Tensor::full(vec![2, 2, 2], 1.0),
            nu: Tensor::full(vec![2, 2, 2], 0.5),
            alpha: Tensor::new(
                vec![2, 2, 2],
                vec![5.0, 1.0, 1.0, 5.0, 5.0, 1.0, 5.0, 1.0],
            )
            .unwrap(),
        };
        assert_eq!(
            correctness_map(&mixed, 0).values.data(),
            &[1.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn uncertainty_mse_closed_forms() {
        let ones = CorrectnessMap {
            values: Tensor::full(vec![2, 2], 1.0),
        };
        let zeros = CorrectnessMap {
            values: Tensor::full(vec![2, 2], 0.0),
        };
        // û == 1−C exactly → 0
        let u = Tensor::full(vec![2, 2], 0.0);
        assert_eq!(uncertainty_loss(&u, &ones).unwrap(), 0.0);
        // û all 0.3 vs C all 1 → 0.09
        let u = Tensor::full(vec![2, 2], 0.3);
        assert!((uncertainty_loss(&u, &ones).unwrap() - 0.09).abs() < 1e-12);
        // û all 0 vs C all 0 → 1.0
        let u = Tensor::full(vec![2, 2], 0.0);
        assert!((uncertainty_loss(&u, &zeros).unwrap() - 1.0).abs() < 1e-12);
        // dim mismatch is an error
        let bad = Tensor::full(vec![2, 3], 0.0);
        assert!(uncertainty_loss(&bad, &ones).is_err());
    }

    #[test]
    fn consistency_closed_forms() {
        // identical distributions → 0
        let z = vec![vec![0.7, -0.1]];
        assert!(consistency_loss(&z, &[1.0], &[0.7, -0.1]).abs() < 1e-12);
        // zero confidence → 0
        assert!(consistency_loss(&z, &[0.0], &[2.0, 0.0]).abs() < 1e-15);
        // P=[0.8,0.2] vs Q=[0.5,0.5] → 0.8·ln1.6 + 0.2·ln0.4 ≈ 0.1927
        let zl = vec![vec![(4.0f64).ln(), 0.0]];
        let got = consistency_loss(&zl, &[1.0], &[0.0, 0.0]);
        let expect = 0.8 * (1.6f64).ln() + 0.2 * (0.4f64).ln();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.1927).abs() < 1e-4);
    }

    #[test]
    fn confidence_closed_forms() {
        // all patches correct, c = 1 → 0
        let z = vec![vec![3.0, 0.0], vec![2.0, -1.0]];
        assert_eq!(confidence_loss(&[1.0, 1.0], &z, 0).unwrap(), 0.0);
        // one patch, c = 0.5, correct → 0.25
        let z1 = vec![vec![3.0, 0.0]];
        assert!((confidence_loss(&[0.5], &z1, 0).unwrap() - 0.25).abs() < 1e-12);
        // (c=1, wrong), (c=0, correct) → 1.0
        let z2 = vec![vec![0.0, 3.0], vec![3.0, 0.0]];
        assert!((confidence_loss(&[1.0, 0.0], &z2, 0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diversity_closed_forms() {
        // identical distributions → 1
        let same = vec![vec![0.4, -1.0], vec![0.4, -1.0]];
        assert!((diversity_loss(&same) - 1.0).abs() < 1e-12);
        // near-orthogonal one-hots → ~0
        let orth = vec![vec![50.0, -50.0], vec![-50.0, 50.0]];
        assert!(diversity_loss(&orth).abs() < 1e-4);
        // K=3, p1=p2=[1,0], p3=[0,1] → mean(1, 0, 0) = 1/3
        let three = vec![
            vec![50.0, -50.0],
            vec![50.0, -50.0],
            vec![-50.0, 50.0],
        ];
        assert!((diversity_loss(&three) - 1.0 / 3.0).abs() < 1e-4);
        // K < 2 → 0
        assert_eq!(diversity_loss(&[vec![1.0, 0.0]]), 0.0);
    }

    #[test]
    fn total_weighted_dot_products() {
        let c1 = LossWeights::default();
        let b = total_loss([1.0; 7], c1);
        assert!((b.total - 2.7).abs() < 1e-12);
        let c4 = LossWeights {
            uncertainty: 0.6,
            ..LossWeights::default()
        };
        let b = total_loss([1.0; 7], c4);
        assert!((b.total - 3.0).abs() < 1e-12);
        let zeroed = LossWeights {
            fused: 0.0,
            global: 0.0,
            local: 0.0,
            uncertainty: 0.0,
            consistency: 0.0,
            confidence: 0.0,
            diversity: 0.0,
        };
        assert_eq!(total_loss([1.0; 7], zeroed).total, 0.0);
    }

    #[test]
    fn breakdown_total_invariant() {
        let mut rng = RngState::new(17);
        for _ in 0..100 {
            let comps: Vec<f64> = (0..7).map(|_| rng.uniform_in(0.0, 3.0)).collect();
            let w = LossWeights {
                fused: rng.uniform(),
                global: rng.uniform(),
                local: rng.uniform(),
                uncertainty: rng.uniform(),
                consistency: rng.uniform(),
                confidence: rng.uniform(),
                diversity: rng.uniform(),
            };
            let b = total_loss(comps.clone().try_into().unwrap(), w);
            let dot: f64 = b
                .components()
                .iter()
                .zip(&w.as_array())
                .map(|(c, w)| w * c)
                .sum();
            assert!((b.total - dot).abs() <= 1e-12);
        }
    }

    #[test]
    fn graph_and_value_routes_agree() {
        let mut rng = RngState::new(99);
        for _ in 0..50 {
            let c = 3;
            let k = 3;
            let zg: Vec<f64> = (0..c).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let zs: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..c).map(|_| rng.uniform_in(-2.0, 2.0)).collect())
                .collect();
            let cs: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let label = rng.below(c as u64) as usize;

            let tape = Tape::new();
            let zg_v = tape.constant(Tensor::from_vec(zg.clone()));
            let zs_v: Vec<Var> = zs
                .iter()
                .map(|z| tape.constant(Tensor::from_vec(z.clone())))
                .collect();
            let cs_v: Vec<Var> = cs.iter().map(|&x| tape.scalar(x)).collect();

            let ce_g = tape.item(ce_graph(&tape, zg_v, label).unwrap());
            assert!((ce_g - ce_loss(&zg, label).unwrap()).abs() < 1e-10);

            let cons_g = tape.item(consistency_graph(&tape, &zs_v, &cs_v, zg_v).unwrap());
            assert!((cons_g - consistency_loss(&zs, &cs, &zg)).abs() < 1e-10);

            let correct: Vec<f64> = zs
                .iter()
                .map(|z| if argmax(z) == label { 1.0 } else { 0.0 })
                .collect();
            let conf_g = tape.item(confidence_graph(&tape, &cs_v, &correct).unwrap());
            assert!((conf_g - confidence_loss(&cs, &zs, label).unwrap()).abs() < 1e-10);

            let div_g = tape.item(diversity_graph(&tape, &zs_v).unwrap());
            assert!((div_g - diversity_loss(&zs)).abs() < 1e-10);
        }
    }

    #[test]
    fn components_are_non_negative_on_random_inputs() {
        let mut rng = RngState::new(7);
        for _ in 0..200 {
            let c = 2 + rng.below(3) as usize;
            let k = 1 + rng.below(4) as usize;
            let zg: Vec<f64> = (0..c).map(|_| rng.uniform_in(-4.0, 4.0)).collect();
            let zs: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..c).map(|_| rng.uniform_in(-4.0, 4.0)).collect())
                .collect();
            let cs: Vec<f64> = (0..k).map(|_| rng.uniform()).collect();
            let label = rng.below(c as u64) as usize;
            assert!(ce_loss(&zg, label).unwrap() >= 0.0);
            assert!(consistency_loss(&zs, &cs, &zg) >= -1e-15);
            assert!(confidence_loss(&cs, &zs, label).unwrap() >= 0.0);
            let d = diversity_loss(&zs);
            assert!((0.0..=1.0 + 1e-12).contains(&d));
        }
    }
}
