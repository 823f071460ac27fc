//! Evidential uncertainty: Dirichlet parameterization of raw evidence and the
//! normalized per-pixel uncertainty map.
//!
//! The evidence tensor E has 4C channels per location. Channels [0,C) map
//! through softplus to the per-class strength β ("inverse of uncertainty"),
//! channels [C,2C) map through a class-axis softmax to the mass belief ν
//! (a per-pixel simplex), and the concentration is α = β·ν + 1. Channels
//! [2C,4C) are produced by the head for interface compatibility but feed no
//! formula. Per-pixel uncertainty averages an aleatoric term 1/α and an
//! epistemic term β/(α(α+1)) over classes, then is min-max normalized per map.

use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::tensor::Tensor;

/// Stabilizer used everywhere an ε appears in this module.
pub const EPSILON: f64 = 1e-6;

/// Dirichlet parameters on the feature grid, all shaped [h, w, C].
#[derive(Debug, Clone)]
pub struct DirichletParams {
    pub beta: Tensor,
    pub nu: Tensor,
    pub alpha: Tensor,
}

impl DirichletParams {
    pub fn num_classes(&self) -> usize {
        *self.alpha.shape().last().unwrap()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.alpha.shape()[0], self.alpha.shape()[1])
    }
}

/// Per-pixel uncertainty, raw and min-max normalized to [0, 1].
#[derive(Debug, Clone)]
pub struct UncertaintyMap {
    pub raw: Tensor,
    pub normalized: Tensor,
    pub epsilon: f64,
}

impl UncertaintyMap {
    /// Debug dump of the normalized map as an 8-bit PGM (round(255·û)).
    pub fn write_pgm(&self, path: &std::path::Path) -> Result<(), crate::error::DataError> {
        crate::pgm::write_pgm(path, &self.normalized)
    }
}

/// Graph-side Dirichlet parameters.
#[derive(Debug, Clone, Copy)]
pub struct DirichletVars {
    pub beta: Var,
    pub nu: Var,
    pub alpha: Var,
}

/// Graph-side uncertainty map.
#[derive(Debug, Clone, Copy)]
pub struct UncertaintyVars {
    pub raw: Var,
    pub normalized: Var,
}

/// β = softplus(E[..,0:C]) + ε, ν = softmax(E[..,C:2C]), α = β·ν + 1.
pub fn evidence_to_dirichlet_graph(
    tape: &Tape,
    evidence: Var,
    epsilon: f64,
) -> Result<DirichletVars, TensorError> {
    let shape = tape.shape(evidence);
    if shape.len() != 3 || shape[2] % 4 != 0 {
        return Err(TensorError::InvalidShape {
            op: "evidence_to_dirichlet",
            shape,
            reason: "expected [h, w, 4C]".into(),
        });
    }
    let c = shape[2] / 4;
    let beta_raw = tape.slice_axis(evidence, 2, 0, c)?;
    let beta = tape.add_scalar(tape.softplus(beta_raw), epsilon);
    let nu_raw = tape.slice_axis(evidence, 2, c, c)?;
    let nu = tape.softmax_last(nu_raw)?;
    let alpha = tape.add_scalar(tape.mul(beta, nu)?, 1.0);
    Ok(DirichletVars { beta, nu, alpha })
}

/// Raw per-pixel uncertainty (mean over classes of 1/α + β/(α(α+1))) and its
/// per-map min-max normalization with stabilizer ε.
pub fn uncertainty_map_graph(
    tape: &Tape,
    params: &DirichletVars,
    epsilon: f64,
) -> Result<UncertaintyVars, TensorError> {
    let alpha = params.alpha;
    let aleatoric = tape.recip(alpha)?;
    let alpha_p1 = tape.add_scalar(alpha, 1.0);
    let epistemic = tape.mul(params.beta, tape.recip(tape.mul(alpha, alpha_p1)?)?)?;
    let per_class = tape.add(aleatoric, epistemic)?;
    let raw = tape.reduce_mean(per_class, 2)?;
    let normalized = normalize_map_graph(tape, raw, epsilon)?;
    Ok(UncertaintyVars { raw, normalized })
}

/// (x − min) / (max − min + ε), elementwise over the whole map.
pub fn normalize_map_graph(tape: &Tape, raw: Var, epsilon: f64) -> Result<Var, TensorError> {
    let mn = tape.min_all(raw);
    let mx = tape.max_all(raw);
    let range = tape.add_scalar(tape.sub(mx, mn)?, epsilon);
    let shifted = tape.sub_scalar_node(raw, mn)?;
    tape.div_scalar_node(shifted, range)
}

/// Value-level wrapper over [`evidence_to_dirichlet_graph`].
pub fn evidence_to_dirichlet(evidence: &Tensor, epsilon: f64) -> Result<DirichletParams, TensorError> {
    let tape = Tape::new();
    let e = tape.constant(evidence.clone());
    let d = evidence_to_dirichlet_graph(&tape, e, epsilon)?;
    Ok(DirichletParams {
        beta: tape.value(d.beta),
        nu: tape.value(d.nu),
        alpha: tape.value(d.alpha),
    })
}

/// Value-level wrapper over [`uncertainty_map_graph`].
pub fn uncertainty_map(params: &DirichletParams) -> Result<UncertaintyMap, TensorError> {
    let tape = Tape::new();
    let d = DirichletVars {
        beta: tape.constant(params.beta.clone()),
        nu: tape.constant(params.nu.clone()),
        alpha: tape.constant(params.alpha.clone()),
    };
    let u = uncertainty_map_graph(&tape, &d, EPSILON)?;
    Ok(UncertaintyMap {
        raw: tape.value(u.raw),
        normalized: tape.value(u.normalized),
        epsilon: EPSILON,
    })
}

/// Total predictive uncertainty of a single Dirichlet:
/// Σ_c (α_c/S)(1 − α_c/S)/(S+1) with S = Σ_c α_c.
pub fn total_dirichlet_uncertainty(alpha: &[f64]) -> f64 {
    debug_assert!(alpha.iter().all(|&a| a > 0.0));
    let s: f64 = alpha.iter().sum();
    alpha
        .iter()
        .map(|&a| {
            let p = a / s;
            p * (1.0 - p) / (s + 1.0)
        })
        .sum()
}

/// Expected class probabilities α_c/S per pixel, shaped [h, w, C].
pub fn expected_probabilities(params: &DirichletParams) -> Tensor {
    let c = params.num_classes();
    let alpha = params.alpha.data();
    let mut out = vec![0.0; alpha.len()];
    for (row_a, row_o) in alpha.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
        let s: f64 = row_a.iter().sum();
        for (o, &a) in row_o.iter_mut().zip(row_a) {
            *o = a / s;
        }
    }
    Tensor::new(params.alpha.shape().to_vec(), out).unwrap()
}

/// Per-pixel argmax class of the concentration (equivalently of α/S).
pub fn argmax_classes(alpha: &Tensor) -> Vec<usize> {
    let c = *alpha.shape().last().unwrap();
    alpha
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_evidence(h: usize, w: usize, c: usize, beta_raw: f64, nu_raw: &[f64]) -> Tensor {
        assert_eq!(nu_raw.len(), c);
        let mut data = Vec::with_capacity(h * w * 4 * c);
        for _ in 0..h * w {
            data.extend(std::iter::repeat(beta_raw).take(c));
            data.extend_from_slice(nu_raw);
            data.extend(std::iter::repeat(0.0).take(2 * c));
        }
        Tensor::new(vec![h, w, 4 * c], data).unwrap()
    }

    #[test]
    fn zero_evidence_gives_ln2_beta_and_uniform_nu() {
        let e = grid_evidence(1, 1, 2, 0.0, &[0.0, 0.0]);
        let d = evidence_to_dirichlet(&e, EPSILON).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((d.beta.data()[0] - (ln2 + EPSILON)).abs() < 1e-12);
        assert!((d.nu.data()[0] - 0.5).abs() < 1e-12);
        assert!((d.alpha.data()[0] - 1.3466).abs() < 1e-4);
    }

    #[test]
    fn equal_nu_logits_give_uniform_mass_for_any_value() {
        for t in [-40.0, -3.0, 0.0, 7.5] {
            let e = grid_evidence(1, 1, 2, 1.0, &[t, t]);
            let d = evidence_to_dirichlet(&e, EPSILON).unwrap();
            assert!((d.nu.data()[0] - 0.5).abs() < 1e-12);
            assert!((d.nu.data()[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn very_negative_evidence_collapses_alpha_to_one() {
        let e = grid_evidence(1, 1, 2, -60.0, &[0.0, 0.0]);
        let d = evidence_to_dirichlet(&e, EPSILON).unwrap();
        assert!(d.beta.data()[0] < 1e-5);
        assert!((d.alpha.data()[0] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn nu_rows_sum_to_one() {
        let e = grid_evidence(2, 3, 4, 0.7, &[0.3, -1.0, 2.0, 0.1]);
        let d = evidence_to_dirichlet(&e, EPSILON).unwrap();
        for row in d.nu.data().chunks_exact(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn params_from(beta: f64, c: usize, h: usize, w: usize) -> DirichletParams {
        let nu = 1.0 / c as f64;
        let alpha = beta * nu + 1.0;
        DirichletParams {
            beta: Tensor::full(vec![h, w, c], beta),
            nu: Tensor::full(vec![h, w, c], nu),
            alpha: Tensor::full(vec![h, w, c], alpha),
        }
    }

    #[test]
    fn hand_computed_raw_uncertainty_beta_one() {
        // β=1, ν=0.5, C=2 → α=1.5; term = 1/1.5 + 1/(1.5·2.5) = 0.9333
        let p = params_from(1.0, 2, 2, 2);
        let u = uncertainty_map(&p).unwrap();
        for &v in u.raw.data() {
            assert!((v - 0.93333333).abs() < 1e-4, "raw {v}");
        }
        // constant map → normalized all zeros
        assert!(u.normalized.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_computed_raw_uncertainty_beta_hundred() {
        let p = params_from(100.0, 2, 1, 1);
        let u = uncertainty_map(&p).unwrap();
        assert!((u.raw.data()[0] - 0.0573).abs() < 1e-4, "raw {}", u.raw.data()[0]);
    }

    #[test]
    fn total_uncertainty_closed_forms() {
        assert!((total_dirichlet_uncertainty(&[1.0, 1.0]) - 1.0 / 6.0).abs() < 1e-12);
        assert!((total_dirichlet_uncertainty(&[1.0; 4]) - 0.15).abs() < 1e-12);
        assert!(total_dirichlet_uncertainty(&[1000.0, 1.0]) < 1e-3);
    }

    #[test]
    fn expected_probabilities_examples() {
        let p = DirichletParams {
            beta: Tensor::full(vec![1, 1, 2], 1.0),
            nu: Tensor::full(vec![1, 1, 2], 0.5),
            alpha: Tensor::new(vec![1, 1, 2], vec![3.0, 1.0]).unwrap(),
        };
        let probs = expected_probabilities(&p);
        assert_eq!(probs.data(), &[0.75, 0.25]);

        let sym = params_from(2.0, 2, 1, 1);
        let probs = expected_probabilities(&sym);
        assert_eq!(probs.data(), &[0.5, 0.5]);
    }

    #[test]
    fn probabilities_rows_sum_to_one() {
        let e = grid_evidence(3, 3, 3, 0.9, &[0.5, -0.2, 1.4]);
        let d = evidence_to_dirichlet(&e, EPSILON).unwrap();
        let probs = expected_probabilities(&d);
        for row in probs.data().chunks_exact(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalized_map_in_unit_interval_on_fuzzed_inputs() {
        let mut rng = crate::rng::RngState::new(2024);
        for case in 0..1000 {
            let h = 1 + rng.below(6) as usize;
            let w = 1 + rng.below(6) as usize;
            let c = 2 + rng.below(3) as usize;
            let data: Vec<f64> = (0..h * w * 4 * c)
                .map(|_| rng.uniform_in(-30.0, 30.0))
                .collect();
            let e = Tensor::new(vec![h, w, 4 * c], data).unwrap();
            let d = evidence_to_dirichlet(&e, EPSILON).unwrap();
            let u = uncertainty_map(&d).unwrap();
            for &v in u.normalized.data() {
                assert!((0.0..=1.0).contains(&v), "case {case}: {v}");
            }
        }
    }

    #[test]
    fn raw_uncertainty_decreases_as_beta_scales() {
        // Grid of ν on the simplex with min mass ≥ 0.25, β scaled by
        // 1,2,4,10,100 from base 1. Below that mass floor the epistemic term
        // of the low-mass class still rises with β (its turning point is
        // β ≈ √2/ν), so monotonicity only holds on this moderate-skew grid.
        let nus: [&[f64]; 6] = [
            &[0.5, 0.5],
            &[0.6, 0.4],
            &[0.7, 0.3],
            &[0.75, 0.25],
            &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            &[0.5, 0.25, 0.25],
        ];
        for nu in nus {
            let c = nu.len();
            let mut last = f64::INFINITY;
            for scale in [1.0, 2.0, 4.0, 10.0, 100.0] {
                let beta = scale;
                let alpha: Vec<f64> = nu.iter().map(|&n| beta * n + 1.0).collect();
                let p = DirichletParams {
                    beta: Tensor::new(vec![1, 1, c], vec![beta; c]).unwrap(),
                    nu: Tensor::new(vec![1, 1, c], nu.to_vec()).unwrap(),
                    alpha: Tensor::new(vec![1, 1, c], alpha).unwrap(),
                };
                let u = uncertainty_map(&p).unwrap();
                let raw = u.raw.data()[0];
                assert!(raw < last, "ν={nu:?} scale={scale}: {raw} !< {last}");
                last = raw;
            }
        }
    }

    #[test]
    fn uncertainty_map_is_class_permutation_invariant() {
        let e = grid_evidence(2, 2, 3, 0.4, &[1.0, -0.5, 0.3]);
        let d = evidence_to_dirichlet(&e, EPSILON).unwrap();
        let u = uncertainty_map(&d).unwrap();

        // rotate classes: β and ν channels permuted the same way
        let perm = [2usize, 0, 1];
        let permute_last = |t: &Tensor| {
            let c = 3;
            let mut out = t.data().to_vec();
            for (row_o, row_i) in out.chunks_exact_mut(c).zip(t.data().chunks_exact(c)) {
                for (j, &p) in perm.iter().enumerate() {
                    row_o[j] = row_i[p];
                }
            }
            Tensor::new(t.shape().to_vec(), out).unwrap()
        };
        let dp = DirichletParams {
            beta: permute_last(&d.beta),
            nu: permute_last(&d.nu),
            alpha: permute_last(&d.alpha),
        };
        let up = uncertainty_map(&dp).unwrap();
        for (a, b) in u.raw.data().iter().zip(up.raw.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn argmax_classes_reads_rows() {
        let alpha = Tensor::new(vec![1, 2, 3], vec![1.0, 5.0, 2.0, 9.0, 1.0, 1.0]).unwrap();
        assert_eq!(argmax_classes(&alpha), vec![1, 0]);
    }
}
