use ugpl::config::RunConfig;
use ugpl::data::{synthesize, Split, SyntheticConfig};
use ugpl::layers::Phase;
use ugpl::autograd::Tape;
use ugpl::pipeline::AblationMode;
use ugpl::rng::RngState;
use ugpl::trainer::{evaluate, standardize, train, TrainOptions};

fn per_class_acc(labels: &[usize], preds: &[usize]) -> Vec<f64> {
    let mut hit = [0usize; 3];
    let mut tot = [0usize; 3];
    for (&l, &p) in labels.iter().zip(preds) {
        tot[l] += 1;
        if l == p { hit[l] += 1; }
    }
    (0..3).map(|c| (hit[c] as f64 / tot[c].max(1) as f64 * 1000.0).round() / 1000.0).collect()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(9);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(7);

    let dataset = synthesize(&SyntheticConfig { samples_per_class: 334, seed, ..SyntheticConfig::default() }).unwrap();

    for mode in [AblationMode::Full, AblationMode::GlobalOnly] {
        let mut cfg = RunConfig::default();
        cfg.epochs = epochs;
        cfg.seed = seed;
        cfg.optimizer.lr = lr;
        cfg.ablation = mode;
        let dir = std::env::temp_dir().join(format!("ugpl_diag_{}", mode.name()));
        std::fs::remove_dir_all(&dir).ok();
        let opts = TrainOptions { quiet: true, threads: 2, ..TrainOptions::new(&dir) };
        let t0 = std::time::Instant::now();
        let (store, model, outcome) = train(&cfg, &dataset, &opts).unwrap();
        let (report, records) = evaluate(&cfg, &model, &store, &dataset, Split::Test).unwrap();
        let labels: Vec<usize> = records.iter().map(|r| r.label).collect();
        let g: Vec<usize> = records.iter().map(|r| r.global_pred).collect();
        let l: Vec<usize> = records.iter().map(|r| r.local_pred).collect();
        let f: Vec<usize> = records.iter().map(|r| r.fused_pred).collect();
        println!(
            "{:<12} {:>4.0}s best_ep {} | fused {:.4} global {:.4} local {:.4} | w_g {:.2} u_g {:.2}",
            mode.name(), t0.elapsed().as_secs_f64(), outcome.best_epoch,
            report.fused.accuracy, report.global.accuracy, report.local.accuracy,
            report.mean_w_g, report.mean_u_g
        );
        println!("  per-class fused  {:?} global {:?} local {:?}",
            per_class_acc(&labels, &f), per_class_acc(&labels, &g), per_class_acc(&labels, &l));

        if mode == AblationMode::Full {
            // guidance probe with a planted disc
            let probe = synthesize(&SyntheticConfig { samples_per_class: 40, seed: seed + 1000, ..SyntheticConfig::default() }).unwrap();
            let mut hits = 0usize;
            let mut rel = 0.0;
            let mut n = 0;
            for s in probe.samples.iter().filter(|s| s.label == 0).take(40) {
                let (cy, cx, r, amp) = (18.0f64, 42.0f64, 4.0f64, 0.35f64);
                let mut img = s.image.clone();
                for y in 0..64 {
                    for x in 0..64 {
                        let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                        let t = (r - d).clamp(-1.0, 1.0) * 2.5;
                        let mask = 1.0 / (1.0 + (-t).exp());
                        let v = img.at(&[y, x, 0]) + amp * mask;
                        img.set_at(&[y, x, 0], v.clamp(0.0, 1.0));
                    }
                }
                let si = standardize(&img, dataset.normalization);
                let tape = Tape::new();
                let mut rng = RngState::with_stream(1, "diag");
                let fwd = model.forward_sample(&tape, &store, &si, AblationMode::Full, Phase::Eval, &mut rng).unwrap();
                let umap = tape.value(fwd.umap.normalized);
                rel += umap.at(&[2, 5]) - umap.data().iter().sum::<f64>() / 64.0;
                let covered = fwd.patches.as_ref().unwrap().coords.iter().any(|&(x, y)| {
                    (y..y + 16).contains(&(cy as usize)) && (x..x + 16).contains(&(cx as usize))
                });
                if covered { hits += 1; }
                n += 1;
            }
            println!("  guidance: disc covered {hits}/{n}, û(disc)-mean = {:+.3}", rel / n as f64);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
