//! Acceptance suite: one test per criterion, each printing a pass line.
//!
//! Covers gradient correctness, the patch-extraction oracle, evidential
//! closed forms, loss closed forms, fusion identities, the directional
//! ablation on the synthetic task, determinism, round-trip I/O, and
//! loss-weight plumbing.

use std::time::Instant;

use ugpl::autograd::gradcheck::DEFAULT_STEP;
use ugpl::config::RunConfig;
use ugpl::data::{load_dataset, synthesize, write_dataset, Split, SyntheticConfig};
use ugpl::evidential::{evidence_to_dirichlet, uncertainty_map, DirichletParams, EPSILON};
use ugpl::fusion::fuse_with_weight;
use ugpl::losses::{
    ce_loss, confidence_loss, consistency_loss, diversity_loss, total_loss, uncertainty_loss,
    CorrectnessMap, LossWeights,
};
use ugpl::patch::{brute_force_reference, extract_patches, PatchExtractConfig, Selection, Suppression};
use ugpl::pipeline::AblationMode;
use ugpl::rng::RngState;
use ugpl::tensor::Tensor;
use ugpl::trainer::{build_model, evaluate, train, TrainOptions};
use ugpl::verify;

fn pass(criterion: &str, detail: String) {
    println!("[PASS] {criterion}: {detail}");
}

#[test]
fn criterion_1_gradient_correctness() {
    let started = Instant::now();
    let reports = verify::gradcheck_suite(DEFAULT_STEP, 1e-4, 4).expect("suite runs");
    for r in &reports {
        assert!(r.pass, "{}", r.summary());
        assert!(!r.non_finite, "{}", r.summary());
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed <= 60.0, "gradcheck took {elapsed:.1}s, budget 60s");
    pass(
        "criterion 1 (gradient correctness)",
        format!(
            "{} checks (every op, every loss component, full objective) at rel tol 1e-4 in {elapsed:.1}s",
            reports.len()
        ),
    );
}

#[test]
fn criterion_2_patch_extraction_oracle() {
    let started = Instant::now();
    let mut rng = RngState::with_stream(2024, "oracle-cases");
    let mut cases = 0;
    while cases < 200 {
        let p = if rng.below(2) == 0 { 4 } else { 8 };
        let k = 1 + rng.below(3) as usize;
        let h = (p + 4 + rng.below(44) as usize).min(48);
        let w = (p + 4 + rng.below(44) as usize).min(48);
        let mh = (2 + rng.below(31) as usize).min(h).min(32);
        let mw = (2 + rng.below(31) as usize).min(w).min(32);
        let selection = if rng.below(2) == 0 {
            Selection::WindowMean
        } else {
            Selection::PixelArgmax
        };
        let suppression = if rng.below(2) == 0 {
            Suppression::HardMask
        } else {
            Suppression::Gaussian
        };
        // every 10th case is an all-zero map to exercise the fallback path
        let map = if cases % 10 == 9 {
            Tensor::zeros(vec![mh, mw])
        } else {
            Tensor::new(
                vec![mh, mw],
                (0..mh * mw).map(|_| rng.uniform()).collect(),
            )
            .unwrap()
        };
        let image = Tensor::new(
            vec![h, w, 1],
            (0..h * w).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let cfg = PatchExtractConfig {
            patch_size: p,
            num_patches: k,
            margin: p / 4,
            suppression,
            gaussian_sigma: p as f64 / 2.0,
            selection,
            diversity_lambda: 0.0,
        };
        let mut rng_fast = RngState::with_stream(900 + cases as u64, "extract");
        let fast = extract_patches(&image, &map, &cfg, &mut rng_fast).unwrap();
        let mut rng_brute = RngState::with_stream(900 + cases as u64, "extract");
        let brute = brute_force_reference(&image, &map, &cfg, &mut rng_brute).unwrap();
        assert_eq!(
            fast.coords, brute.coords,
            "case {cases}: h={h} w={w} p={p} k={k} sel={selection:?} sup={suppression:?}"
        );
        assert_eq!(fast.fallback_used, brute.fallback_used, "case {cases}");
        for (a, b) in fast.patches.iter().zip(&brute.patches) {
            assert_eq!(a.data(), b.data(), "case {cases}: patch pixels differ");
        }
        cases += 1;
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed <= 30.0, "oracle suite took {elapsed:.1}s, budget 30s");
    pass(
        "criterion 2 (patch-extraction oracle)",
        format!("200 cases, exact coordinate + fallback match in {elapsed:.1}s"),
    );
}

#[test]
fn criterion_3_evidential_math() {
    // hand-computed values
    let params = |beta: f64| {
        let alpha = beta * 0.5 + 1.0;
        DirichletParams {
            beta: Tensor::full(vec![2, 2, 2], beta),
            nu: Tensor::full(vec![2, 2, 2], 0.5),
            alpha: Tensor::full(vec![2, 2, 2], alpha),
        }
    };
    let u1 = uncertainty_map(&params(1.0)).unwrap();
    assert!((u1.raw.data()[0] - 0.9333).abs() <= 1e-4);
    let u100 = uncertainty_map(&params(100.0)).unwrap();
    assert!((u100.raw.data()[0] - 0.0573).abs() <= 1e-4);

    // 1000 fuzzed maps stay in [0,1]
    let mut rng = RngState::with_stream(3, "fuzz");
    for _ in 0..1000 {
        let h = 1 + rng.below(8) as usize;
        let w = 1 + rng.below(8) as usize;
        let c = 2 + rng.below(4) as usize;
        let e = Tensor::new(
            vec![h, w, 4 * c],
            (0..h * w * 4 * c).map(|_| rng.uniform_in(-40.0, 40.0)).collect(),
        )
        .unwrap();
        let d = evidence_to_dirichlet(&e, EPSILON).unwrap();
        let u = uncertainty_map(&d).unwrap();
        for &v in u.normalized.data() {
            assert!((0.0..=1.0).contains(&v), "normalized {v} out of range");
        }
    }

    // β-scaling monotonicity grid (moderate-skew masses)
    let nus: [&[f64]; 4] = [&[0.5, 0.5], &[0.7, 0.3], &[0.75, 0.25], &[1.0 / 3.0; 3]];
    for nu in nus {
        let c = nu.len();
        let mut last = f64::INFINITY;
        for scale in [1.0, 2.0, 4.0, 10.0, 100.0] {
            let alpha: Vec<f64> = nu.iter().map(|&n| scale * n + 1.0).collect();
            let p = DirichletParams {
                beta: Tensor::new(vec![1, 1, c], vec![scale; c]).unwrap(),
                nu: Tensor::new(vec![1, 1, c], nu.to_vec()).unwrap(),
                alpha: Tensor::new(vec![1, 1, c], alpha).unwrap(),
            };
            let raw = uncertainty_map(&p).unwrap().raw.data()[0];
            assert!(raw < last, "monotonicity: ν={nu:?} scale={scale}");
            last = raw;
        }
    }
    pass(
        "criterion 3 (evidential math)",
        "closed forms ±1e-4, 1000-case range fuzz, β-monotonicity grid".to_string(),
    );
}

#[test]
fn criterion_4_closed_form_loss_values() {
    let tol = 1e-4;
    // cross-entropy
    assert!((ce_loss(&[0.0, 0.0], 0).unwrap() - 0.6931).abs() <= tol);
    assert!((ce_loss(&[1.0, 0.0], 0).unwrap() - 0.3133).abs() <= tol);
    // KL consistency
    let got = consistency_loss(&[vec![(4.0f64).ln(), 0.0]], &[1.0], &[0.0, 0.0]);
    assert!((got - 0.1927).abs() <= tol);
    // diversity {1.0, 0.0, 1/3}
    assert!((diversity_loss(&[vec![0.3, -1.0], vec![0.3, -1.0]]) - 1.0).abs() <= tol);
    assert!(diversity_loss(&[vec![50.0, -50.0], vec![-50.0, 50.0]]).abs() <= tol);
    let three = vec![vec![50.0, -50.0], vec![50.0, -50.0], vec![-50.0, 50.0]];
    assert!((diversity_loss(&three) - 1.0 / 3.0).abs() <= tol);
    // uncertainty MSE {0, 0.09, 1.0}
    let ones = CorrectnessMap {
        values: Tensor::full(vec![2, 2], 1.0),
    };
    let zeros = CorrectnessMap {
        values: Tensor::full(vec![2, 2], 0.0),
    };
    assert!(uncertainty_loss(&Tensor::full(vec![2, 2], 0.0), &ones).unwrap() <= tol);
    assert!(
        (uncertainty_loss(&Tensor::full(vec![2, 2], 0.3), &ones).unwrap() - 0.09).abs() <= tol
    );
    assert!(
        (uncertainty_loss(&Tensor::full(vec![2, 2], 0.0), &zeros).unwrap() - 1.0).abs() <= tol
    );
    // confidence {0, 0.25, 1.0}
    let correct = vec![vec![3.0, 0.0]];
    assert!(confidence_loss(&[1.0], &correct, 0).unwrap() <= tol);
    assert!((confidence_loss(&[0.5], &correct, 0).unwrap() - 0.25).abs() <= tol);
    let two = vec![vec![0.0, 3.0], vec![3.0, 0.0]];
    assert!((confidence_loss(&[1.0, 0.0], &two, 0).unwrap() - 1.0).abs() <= tol);
    pass(
        "criterion 4 (closed-form loss values)",
        "CE, KL, diversity, uncertainty-MSE, confidence all within 1e-4".to_string(),
    );
}

#[test]
fn criterion_5_fusion_boundary_identities() {
    let mut rng = RngState::with_stream(5, "fusion");
    for _ in 0..1000 {
        let c = 2 + rng.below(4) as usize;
        let zg: Vec<f64> = (0..c).map(|_| rng.uniform_in(-6.0, 6.0)).collect();
        let zl: Vec<f64> = (0..c).map(|_| rng.uniform_in(-6.0, 6.0)).collect();
        // injected boundary weights reproduce the inputs exactly
        assert_eq!(fuse_with_weight(&zg, &zl, 1.0), zg);
        assert_eq!(fuse_with_weight(&zg, &zl, 0.0), zl);
        // componentwise betweenness for interior weights
        let w = rng.uniform();
        let fused = fuse_with_weight(&zg, &zl, w);
        for i in 0..c {
            let (lo, hi) = (zg[i].min(zl[i]), zg[i].max(zl[i]));
            let slack = 4.0 * f64::EPSILON * (1.0 + lo.abs().max(hi.abs()));
            assert!(fused[i] >= lo - slack && fused[i] <= hi + slack);
        }
    }
    pass(
        "criterion 5 (fusion boundary identities)",
        "w∈{0,1} exact, betweenness on 1000 fuzzed triples".to_string(),
    );
}

#[test]
fn criterion_6_directional_ablation() {
    let seed = 7u64;
    let dataset = synthesize(&SyntheticConfig {
        samples_per_class: 334, // 600 train / 198 val / 204 test after 60/20/20
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    assert_eq!(dataset.indices(Split::Train).len(), 600);

    let mut base = RunConfig::default();
    base.seed = seed;
    base.epochs = 8;

    let mut results = Vec::new();
    for mode in [AblationMode::Full, AblationMode::GlobalOnly] {
        let mut cfg = base.clone();
        cfg.ablation = mode;
        let dir = std::env::temp_dir().join(format!("ugpl_acc6_{}", mode.name()));
        std::fs::remove_dir_all(&dir).ok();
        let opts = TrainOptions {
            quiet: true,
            threads: 2,
            ..TrainOptions::new(&dir)
        };
        let started = Instant::now();
        let (store, model, _) = train(&cfg, &dataset, &opts).unwrap();
        let elapsed = started.elapsed().as_secs_f64();
        assert!(
            elapsed <= 600.0,
            "{} training took {elapsed:.0}s, budget 600s",
            mode.name()
        );
        let (report, _) = evaluate(&cfg, &model, &store, &dataset, Split::Test).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        results.push((mode, report, elapsed));
    }

    let full = &results[0].1;
    let global_only = &results[1].1;
    let gap = full.fused.accuracy - global_only.fused.accuracy;
    assert!(
        gap >= 0.05,
        "fused accuracy gap {gap:.4} below 5 points (full {:.4} vs global-only {:.4})",
        full.fused.accuracy,
        global_only.fused.accuracy
    );
    assert!(
        full.fused.accuracy >= full.global.accuracy.max(full.local.accuracy),
        "fused {:.4} below components (global {:.4}, local {:.4})",
        full.fused.accuracy,
        full.global.accuracy,
        full.local.accuracy
    );
    pass(
        "criterion 6 (directional ablation)",
        format!(
            "full fused {:.4} vs global-only {:.4} (gap {:.1} pts); components global {:.4} local {:.4}; {:.0}s + {:.0}s",
            full.fused.accuracy,
            global_only.fused.accuracy,
            gap * 100.0,
            full.global.accuracy,
            full.local.accuracy,
            results[0].2,
            results[1].2
        ),
    );
}

#[test]
fn criterion_7_determinism() {
    let dataset = synthesize(&SyntheticConfig {
        samples_per_class: 20,
        seed: 11,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 11;
    cfg.epochs = 2;
    cfg.batch_size = 16;

    let run = |tag: &str| {
        let dir = std::env::temp_dir().join(format!("ugpl_acc7_{tag}"));
        std::fs::remove_dir_all(&dir).ok();
        let opts = TrainOptions {
            deterministic: true,
            quiet: true,
            ..TrainOptions::new(&dir)
        };
        let (store, model, outcome) = train(&cfg, &dataset, &opts).unwrap();
        let log = std::fs::read(&outcome.log).unwrap();
        let (report, _) = evaluate(&cfg, &model, &store, &dataset, Split::Test).unwrap();
        let metrics = serde_json::to_vec(&report).unwrap();
        std::fs::remove_dir_all(&dir).ok();
        (log, metrics)
    };
    let (log_a, metrics_a) = run("a");
    let (log_b, metrics_b) = run("b");
    assert_eq!(log_a, log_b, "training logs differ between identical runs");
    assert_eq!(metrics_a, metrics_b, "metrics differ between identical runs");
    pass(
        "criterion 7 (determinism)",
        format!("bit-identical logs ({} bytes) and metrics", log_a.len()),
    );
}

#[test]
fn criterion_8_round_trip_io() {
    // dataset: synthesize → write → load within 8-bit quantization
    let dir = std::env::temp_dir().join("ugpl_acc8_data");
    std::fs::remove_dir_all(&dir).ok();
    let synth_cfg = SyntheticConfig {
        samples_per_class: 10,
        seed: 13,
        ..SyntheticConfig::default()
    };
    let ds = synthesize(&synth_cfg).unwrap();
    write_dataset(&ds, &synth_cfg, &dir).unwrap();
    let loaded = load_dataset(&dir, None).unwrap();
    let mut max_diff = 0.0f64;
    for (a, b) in ds.samples.iter().zip(&loaded.samples) {
        for (x, y) in a.image.data().iter().zip(b.image.data()) {
            max_diff = max_diff.max((x - y).abs());
        }
    }
    assert!(max_diff <= 1.0 / 255.0 + 1e-12, "max diff {max_diff}");
    std::fs::remove_dir_all(&dir).ok();

    // checkpoint: save → load reproduces evaluation metrics exactly
    let dataset = synthesize(&SyntheticConfig {
        samples_per_class: 12,
        seed: 13,
        image_size: (32, 32),
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 13;
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.model.global.input_size = (32, 32);
    cfg.model.patch.num_patches = 2;
    let run_dir = std::env::temp_dir().join("ugpl_acc8_ckpt");
    std::fs::remove_dir_all(&run_dir).ok();
    let opts = TrainOptions {
        quiet: true,
        deterministic: true,
        ..TrainOptions::new(&run_dir)
    };
    let (store, model, outcome) = train(&cfg, &dataset, &opts).unwrap();
    let (before, _) = evaluate(&cfg, &model, &store, &dataset, Split::Test).unwrap();
    let (mut fresh_store, fresh_model) = build_model(&cfg).unwrap();
    ugpl::checkpoint::load_into(&mut fresh_store, &outcome.checkpoint).unwrap();
    let (after, _) = evaluate(&cfg, &fresh_model, &fresh_store, &dataset, Split::Test).unwrap();
    assert_eq!(
        serde_json::to_string(&before).unwrap(),
        serde_json::to_string(&after).unwrap(),
        "metrics changed across checkpoint reload"
    );
    std::fs::remove_dir_all(&run_dir).ok();
    pass(
        "criterion 8 (round-trip I/O)",
        format!("pixel round trip ≤ 1/255 (max {max_diff:.5}); checkpoint metrics exact"),
    );
}

#[test]
fn criterion_9_loss_weight_plumbing() {
    let dataset = synthesize(&SyntheticConfig {
        samples_per_class: 12,
        seed: 17,
        image_size: (32, 32),
        ..SyntheticConfig::default()
    })
    .unwrap();
    let c1 = LossWeights::default();
    let c4 = LossWeights {
        uncertainty: 0.6,
        ..LossWeights::default()
    };
    // sanity of the weight vectors themselves
    assert!((total_loss([1.0; 7], c1).total - 2.7).abs() < 1e-12);
    assert!((total_loss([1.0; 7], c4).total - 3.0).abs() < 1e-12);

    for (tag, weights) in [("c1", c1), ("c4", c4)] {
        let mut cfg = RunConfig::default();
        cfg.seed = 17;
        cfg.epochs = 1;
        cfg.batch_size = 8;
        cfg.model.global.input_size = (32, 32);
        cfg.model.patch.num_patches = 2;
        cfg.loss_weights = weights;
        let dir = std::env::temp_dir().join(format!("ugpl_acc9_{tag}"));
        std::fs::remove_dir_all(&dir).ok();
        let opts = TrainOptions {
            quiet: true,
            deterministic: true,
            ..TrainOptions::new(&dir)
        };
        let (_, _, outcome) = train(&cfg, &dataset, &opts).unwrap();
        let log = std::fs::read_to_string(&outcome.log).unwrap();
        let w = weights.as_array();
        let mut records = 0;
        for line in log.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let loss = &v["loss"];
            let comps = [
                loss["fused"].as_f64().unwrap(),
                loss["global"].as_f64().unwrap(),
                loss["local"].as_f64().unwrap(),
                loss["uncertainty"].as_f64().unwrap(),
                loss["consistency"].as_f64().unwrap(),
                loss["confidence"].as_f64().unwrap(),
                loss["diversity"].as_f64().unwrap(),
            ];
            let dot: f64 = comps.iter().zip(&w).map(|(c, w)| c * w).sum();
            let total = loss["total"].as_f64().unwrap();
            assert!(
                (total - dot).abs() <= 1e-12,
                "{tag}: total {total} vs dot {dot}"
            );
            records += 1;
        }
        assert!(records > 0);
        std::fs::remove_dir_all(&dir).ok();
    }
    pass(
        "criterion 9 (loss-weight plumbing)",
        "C1 (2.7) and C4 (3.0) vectors; every logged total equals the weighted dot product within 1e-12"
            .to_string(),
    );
}
