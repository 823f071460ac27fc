//! The gradient-verification suite behind the `gradcheck` CLI command:
//! every tape op, every loss component, and the full seven-component
//! objective through the real pipeline, all against central finite
//! differences.
//!
//! Instances are seeded and chosen away from subgradient kinks (relu at 0,
//! pooling and argmax ties), where a finite-difference probe is valid.

use crate::autograd::gradcheck::{grad_check, grad_check_params, GradCheckReport};
use crate::autograd::{BnMode, Tape, Var};
use crate::config::RunConfig;
use crate::data::{synthesize, SyntheticConfig};
use crate::error::{RunError, TensorError};
use crate::layers::Phase;
use crate::losses::{
    ce_graph, confidence_graph, consistency_graph, correctness_map, diversity_graph,
    uncertainty_graph, LossWeights,
};
use crate::pipeline::{sample_losses, AblationMode};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::trainer::{build_model, standardize};

fn seeded(n: usize, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = RngState::with_stream(seed, "gradcheck");
    Tensor::from_vec((0..n).map(|_| rng.uniform_in(lo, hi)).collect())
}

fn project(tape: &Tape, y: Var, seed: u64) -> Result<Var, TensorError> {
    let n = tape.numel(y);
    let mut rng = RngState::with_stream(seed, "gradcheck-proj");
    let r = tape.constant(
        Tensor::new(tape.shape(y), (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap(),
    );
    Ok(tape.sum_all(tape.mul(y, r)?))
}

type OpCase = (
    &'static str,
    Tensor,
    Box<dyn Fn(&Tape, Var) -> Result<Var, TensorError>>,
);

fn op_cases() -> Vec<OpCase> {
    let signed = |n: usize, s: u64| {
        let t = seeded(n, s, 0.25, 2.0);
        Tensor::from_vec(
            t.data()
                .iter()
                .enumerate()
                .map(|(i, &v)| if i % 2 == 0 { v } else { -v })
                .collect(),
        )
    };
    let positive = |n: usize, s: u64| seeded(n, s, 0.5, 3.0);
    vec![
        ("add", signed(16, 1), Box::new(|t: &Tape, x: Var| {
            let a = t.slice_axis(x, 0, 0, 8)?;
            let b = t.slice_axis(x, 0, 8, 8)?;
            project(t, t.add(a, b)?, 1)
        })),
        ("mul", signed(16, 2), Box::new(|t: &Tape, x: Var| {
            let a = t.slice_axis(x, 0, 0, 8)?;
            let b = t.slice_axis(x, 0, 8, 8)?;
            project(t, t.mul(a, b)?, 2)
        })),
        ("matmul", signed(18, 3), Box::new(|t: &Tape, x: Var| {
            let a = t.reshape(t.slice_axis(x, 0, 0, 6)?, vec![2, 3])?;
            let b = t.reshape(t.slice_axis(x, 0, 6, 12)?, vec![3, 4])?;
            project(t, t.matmul(a, b)?, 3)
        })),
        ("conv2d", signed(2 * 25 + 3 * 2 * 9 + 3, 4), Box::new(|t: &Tape, x: Var| {
            let img = t.reshape(t.slice_axis(x, 0, 0, 50)?, vec![1, 2, 5, 5])?;
            let w = t.reshape(t.slice_axis(x, 0, 50, 54)?, vec![3, 2, 3, 3])?;
            let b = t.slice_axis(x, 0, 104, 3)?;
            project(t, t.conv2d(img, w, Some(b), 2, 1)?, 4)
        })),
        ("max_pool2", signed(32, 5), Box::new(|t: &Tape, x: Var| {
            let img = t.reshape(x, vec![1, 2, 4, 4])?;
            project(t, t.max_pool2(img)?, 5)
        })),
        ("global_avg_pool", signed(18, 6), Box::new(|t: &Tape, x: Var| {
            let img = t.reshape(x, vec![1, 2, 3, 3])?;
            project(t, t.global_avg_pool(img)?, 6)
        })),
        ("relu", signed(12, 7), Box::new(|t: &Tape, x: Var| project(t, t.relu(x), 7))),
        ("sigmoid", signed(12, 8), Box::new(|t: &Tape, x: Var| project(t, t.sigmoid(x), 8))),
        ("softplus", signed(12, 9), Box::new(|t: &Tape, x: Var| project(t, t.softplus(x), 9))),
        ("softmax", signed(12, 10), Box::new(|t: &Tape, x: Var| {
            let m = t.reshape(x, vec![3, 4])?;
            project(t, t.softmax_last(m)?, 10)
        })),
        ("log", positive(12, 11), Box::new(|t: &Tape, x: Var| project(t, t.log(x)?, 11))),
        ("exp", signed(12, 12), Box::new(|t: &Tape, x: Var| project(t, t.exp(x), 12))),
        ("mse", signed(16, 13), Box::new(|t: &Tape, x: Var| {
            let a = t.slice_axis(x, 0, 0, 8)?;
            let b = t.slice_axis(x, 0, 8, 8)?;
            t.mse(a, b)
        })),
        ("reshape", signed(12, 14), Box::new(|t: &Tape, x: Var| {
            project(t, t.reshape(x, vec![3, 4])?, 14)
        })),
        ("concat", signed(10, 15), Box::new(|t: &Tape, x: Var| {
            let a = t.slice_axis(x, 0, 0, 4)?;
            let b = t.slice_axis(x, 0, 4, 6)?;
            project(t, t.concat(&[a, b], 0)?, 15)
        })),
        ("slice", signed(10, 16), Box::new(|t: &Tape, x: Var| {
            project(t, t.slice_axis(x, 0, 3, 5)?, 16)
        })),
        ("reduce_mean", signed(12, 17), Box::new(|t: &Tape, x: Var| {
            let m = t.reshape(x, vec![3, 4])?;
            project(t, t.reduce_mean(m, 1)?, 17)
        })),
        ("reduce_sum", signed(12, 18), Box::new(|t: &Tape, x: Var| {
            let m = t.reshape(x, vec![3, 4])?;
            project(t, t.reduce_sum(m, 0)?, 18)
        })),
        ("batch_norm", signed(20, 19), Box::new(|t: &Tape, x: Var| {
            let img = t.reshape(t.slice_axis(x, 0, 0, 16)?, vec![2, 2, 2, 2])?;
            let gamma = t.slice_axis(x, 0, 16, 2)?;
            let beta = t.slice_axis(x, 0, 18, 2)?;
            let y = t.batch_norm(img, gamma, beta, 1e-5, BnMode::Train { record: None })?;
            project(t, y, 19)
        })),
    ]
}

type LossCase = (
    &'static str,
    Tensor,
    Box<dyn Fn(&Tape, Var) -> Result<Var, TensorError>>,
);

fn loss_cases() -> Vec<LossCase> {
    vec![
        ("loss_fused_ce", seeded(3, 21, -2.0, 2.0), Box::new(|t: &Tape, x: Var| {
            ce_graph(t, x, 1)
        })),
        ("loss_uncertainty", seeded(16, 22, 0.05, 0.95), Box::new(|t: &Tape, x: Var| {
            let map = t.reshape(x, vec![4, 4])?;
            let cmap = crate::losses::CorrectnessMap {
                values: Tensor::new(
                    vec![4, 4],
                    (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
                )
                .unwrap(),
            };
            uncertainty_graph(t, map, &cmap)
        })),
        ("loss_consistency", seeded(3 * 3 + 3 + 3, 23, -2.0, 2.0), Box::new(|t: &Tape, x: Var| {
            let zg = t.slice_axis(x, 0, 0, 3)?;
            let zs: Vec<Var> = (0..3)
                .map(|k| t.slice_axis(x, 0, 3 + 3 * k, 3))
                .collect::<Result<_, _>>()?;
            let cs_raw = t.slice_axis(x, 0, 12, 3)?;
            let cs_vec = t.sigmoid(cs_raw);
            let cs: Vec<Var> = (0..3)
                .map(|k| t.slice_axis(cs_vec, 0, k, 1))
                .collect::<Result<_, _>>()?;
            consistency_graph(t, &zs, &cs, zg)
        })),
        ("loss_confidence", seeded(3, 24, -2.0, 2.0), Box::new(|t: &Tape, x: Var| {
            let cs_vec = t.sigmoid(x);
            let cs: Vec<Var> = (0..3)
                .map(|k| t.slice_axis(cs_vec, 0, k, 1))
                .collect::<Result<_, _>>()?;
            confidence_graph(t, &cs, &[1.0, 0.0, 1.0])
        })),
        ("loss_diversity", seeded(9, 25, -2.0, 2.0), Box::new(|t: &Tape, x: Var| {
            let zs: Vec<Var> = (0..3)
                .map(|k| t.slice_axis(x, 0, 3 * k, 3))
                .collect::<Result<_, _>>()?;
            diversity_graph(t, &zs)
        })),
        ("loss_correctness_mse", seeded(2 * 2 * 8, 26, -1.5, 1.5), Box::new(|t: &Tape, x: Var| {
            // uncertainty loss through the evidential head formulas
            let e = t.reshape(x, vec![2, 2, 8])?;
            let d = crate::evidential::evidence_to_dirichlet_graph(t, e, 1e-6)?;
            let u = crate::evidential::uncertainty_map_graph(t, &d, 1e-6)?;
            let alpha = t.value(d.alpha);
            let params = crate::evidential::DirichletParams {
                beta: t.value(d.beta),
                nu: t.value(d.nu),
                alpha,
            };
            let cmap = correctness_map(&params, 0);
            uncertainty_graph(t, u.normalized, &cmap)
        })),
    ]
}

/// Config for the end-to-end check: the desk architecture on a 32×32 input
/// with two 16-pixel patches keeps probe forwards affordable.
fn gradcheck_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.global.input_size = (32, 32);
    cfg.model.patch.patch_size = 16;
    cfg.model.patch.num_patches = 2;
    cfg.model.patch.margin = 4;
    cfg.seed = 20;
    cfg
}

/// End-to-end check: gradient of the full weighted objective with respect to
/// sampled coordinates of every parameter tensor.
pub fn full_loss_gradcheck(
    probes_per_param: usize,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, RunError> {
    let cfg = gradcheck_run_config();
    let (mut store, model) = build_model(&cfg)?;
    let dataset = synthesize(&SyntheticConfig {
        image_size: (32, 32),
        samples_per_class: 5,
        seed: 20,
        ..SyntheticConfig::default()
    })?;
    // a focal-lesion sample exercises every loss component
    let sample = dataset
        .samples
        .iter()
        .find(|s| s.label == 1)
        .expect("generator emits one sample per class");
    let image = standardize(&sample.image, dataset.normalization);
    let label = sample.label;
    let weights = LossWeights::default();

    let build = move |tape: &Tape, store: &crate::params::ParamStore| -> Result<Var, TensorError> {
        let mut rng = RngState::with_stream(20, "gradcheck-extract");
        let fwd = model.forward_sample(
            tape,
            store,
            &image,
            AblationMode::Full,
            Phase::Train,
            &mut rng,
        )?;
        let (total, _) = sample_losses(tape, &fwd, label, &weights)?;
        Ok(total)
    };
    let mut rng = RngState::with_stream(20, "gradcheck-probes");
    let report = grad_check_params(
        "full_objective",
        build,
        &mut store,
        probes_per_param,
        step,
        tol,
        &mut rng,
    )?;
    Ok(report)
}

/// Run the whole verification suite. Returns every report; `all_pass` on the
/// result tells the caller whether the build is good.
pub fn gradcheck_suite(step: f64, tol: f64, probes_per_param: usize) -> Result<Vec<GradCheckReport>, RunError> {
    let mut reports = Vec::new();
    for (name, point, f) in op_cases() {
        reports.push(grad_check(name, f, &point, step, tol).map_err(RunError::Tensor)?);
    }
    for (name, point, f) in loss_cases() {
        reports.push(grad_check(name, f, &point, step, tol).map_err(RunError::Tensor)?);
    }
    reports.push(full_loss_gradcheck(probes_per_param, step, tol)?);
    Ok(reports)
}

pub fn all_pass(reports: &[GradCheckReport]) -> bool {
    reports.iter().all(|r| r.pass)
}
