//! Finite-difference verification of tape gradients.
//!
//! Central differences with a configurable step are compared against the
//! analytic backward pass. An element passes when either the absolute error
//! is below `abs_tol` (guards near-zero gradients, where the quotient is all
//! rounding noise) or the relative error is below `tol`.

use crate::autograd::{Tape, Var};
use crate::error::TensorError;
use crate::params::{ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Absolute floor under which finite-difference noise dominates.
pub const DEFAULT_ABS_TOL: f64 = 1e-7;

#[derive(Debug, Clone)]
pub struct ElementReport {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub failures: Vec<ElementReport>,
    /// Set when any probe produced a non-finite value; reported, not a crash.
    pub non_finite: bool,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: {} elements, max_rel_err={:.3e}, max_abs_err={:.3e}, {}{}",
            self.name,
            self.checked,
            self.max_rel_err,
            self.max_abs_err,
            if self.pass { "PASS" } else { "FAIL" },
            if self.non_finite { " (non-finite values flagged)" } else { "" },
        )
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - n).abs() / denom
    }
}

struct Accumulator {
    report: GradCheckReport,
    abs_tol: f64,
    tol: f64,
}

impl Accumulator {
    fn new(name: &str, tol: f64, abs_tol: f64) -> Self {
        Accumulator {
            report: GradCheckReport {
                name: name.to_string(),
                checked: 0,
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                failures: Vec::new(),
                non_finite: false,
                pass: true,
            },
            abs_tol,
            tol,
        }
    }

    fn record(&mut self, index: usize, analytic: f64, numeric: f64) {
        self.report.checked += 1;
        if !analytic.is_finite() || !numeric.is_finite() {
            self.report.non_finite = true;
            self.report.pass = false;
            self.report.failures.push(ElementReport {
                index,
                analytic,
                numeric,
                abs_err: f64::INFINITY,
                rel_err: f64::INFINITY,
            });
            return;
        }
        let abs = (analytic - numeric).abs();
        let rel = rel_err(analytic, numeric);
        self.report.max_abs_err = self.report.max_abs_err.max(abs);
        if abs > self.abs_tol {
            self.report.max_rel_err = self.report.max_rel_err.max(rel);
            if rel > self.tol {
                self.report.pass = false;
                self.report.failures.push(ElementReport {
                    index,
                    analytic,
                    numeric,
                    abs_err: abs,
                    rel_err: rel,
                });
            }
        }
    }
}

/// Check the gradient of a scalar-valued tensor function at `point`.
///
/// `f` receives a fresh tape and the (differentiable) input leaf and must
/// return a scalar node. Non-finite evaluations are flagged in the report.
pub fn grad_check<F>(
    name: &str,
    f: F,
    point: &Tensor,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape, Var) -> Result<Var, TensorError>,
{
    assert!(step > 0.0, "step must be positive");
    let tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&tape, x)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));

    let eval = |data: &[f64]| -> Result<f64, TensorError> {
        let t = Tape::new();
        let p = t.leaf(Tensor::new(point.shape().to_vec(), data.to_vec()).unwrap());
        let l = f(&t, p)?;
        Ok(t.item(l))
    };

    let mut acc = Accumulator::new(name, tol, DEFAULT_ABS_TOL);
    let mut probe = point.data().to_vec();
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = eval(&probe)?;
        probe[i] = orig - step;
        let fm = eval(&probe)?;
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        acc.record(i, analytic.data()[i], numeric);
    }
    Ok(acc.report)
}

/// Check gradients of a scalar loss with respect to store parameters.
///
/// `build` runs a full forward pass against the store and returns the loss
/// node. For each parameter, up to `probes_per_param` coordinates are sampled
/// (all coordinates when the tensor is small) and compared against central
/// differences computed by perturbing the store.
pub fn grad_check_params<F>(
    name: &str,
    build: F,
    store: &mut ParamStore,
    probes_per_param: usize,
    step: f64,
    tol: f64,
    rng: &mut RngState,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var, TensorError>,
{
    let tape = Tape::new();
    let loss = build(&tape, store)?;
    tape.backward(loss)?;
    let mut analytic = store.zero_grads();
    tape.accumulate_param_grads(&mut analytic);
    drop(tape);

    let mut acc = Accumulator::new(name, tol, DEFAULT_ABS_TOL);
    let ids: Vec<ParamId> = store.param_ids().collect();
    for pid in ids {
        let numel = store.value(pid).numel();
        let coords: Vec<usize> = if numel <= probes_per_param {
            (0..numel).collect()
        } else {
            (0..probes_per_param)
                .map(|_| rng.below(numel as u64) as usize)
                .collect()
        };
        for &ci in &coords {
            let orig = store.value(pid).data()[ci];
            store.value_mut(pid).data_mut()[ci] = orig + step;
            let fp = {
                let t = Tape::new();
                let l = build(&t, store)?;
                t.item(l)
            };
            store.value_mut(pid).data_mut()[ci] = orig - step;
            let fm = {
                let t = Tape::new();
                let l = build(&t, store)?;
                t.item(l)
            };
            store.value_mut(pid).data_mut()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            acc.record(pid.index() * 1_000_000 + ci, analytic[pid.index()].data()[ci], numeric);
        }
    }
    Ok(acc.report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_analytic_tightly() {
        let mut rng = RngState::new(31);
        let point = Tensor::from_vec((0..4).map(|_| rng.uniform_in(-1.0, 1.0)).collect());
        let report = grad_check(
            "sum_sq",
            |t, x| {
                let sq = t.mul(x, x)?;
                Ok(t.sum_all(sq))
            },
            &point,
            DEFAULT_STEP,
            1e-8,
        )
        .unwrap();
        assert!(report.pass, "{}", report.summary());
        assert!(report.max_rel_err < 1e-8, "{}", report.summary());
    }

    #[test]
    fn constant_function_has_exactly_zero_gradients() {
        let point = Tensor::from_vec(vec![0.4, -0.7, 1.1]);
        let report = grad_check(
            "constant",
            |t, x| {
                let c = t.scale(x, 0.0);
                Ok(t.sum_all(c))
            },
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.pass);
        assert_eq!(report.max_abs_err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu'(x) treated as always-1 would disagree with finite differences
        // for negative inputs; here we simply check the checker flags a real
        // mismatch by comparing x² against x³ probes.
        let point = Tensor::from_vec(vec![1.5]);
        let tape = Tape::new();
        let x = tape.leaf(point.clone());
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        // deliberately compare against derivative of x³ = 3x² = 6.75 vs 2x = 3
        let analytic = tape.grad(x).unwrap().data()[0];
        assert!((analytic - 3.0).abs() < 1e-12);
        let mut acc = Accumulator::new("bogus", DEFAULT_TOL, DEFAULT_ABS_TOL);
        acc.record(0, analytic, 6.75);
        assert!(!acc.report.pass);
    }
}
