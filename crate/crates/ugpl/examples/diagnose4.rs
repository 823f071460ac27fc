use ugpl::config::RunConfig;
use ugpl::data::{synthesize, Split, SyntheticConfig};
use ugpl::pipeline::AblationMode;
use ugpl::trainer::{evaluate, train, TrainOptions};

fn per_class_acc(labels: &[usize], preds: &[usize]) -> Vec<f64> {
    let mut hit = [0usize; 3];
    let mut tot = [0usize; 3];
    for (&l, &p) in labels.iter().zip(preds) {
        tot[l] += 1;
        if l == p { hit[l] += 1; }
    }
    (0..3).map(|c| (hit[c] as f64 / tot[c].max(1) as f64 * 1000.0).round() / 1000.0).collect()
}

fn acceptance_config(epochs: usize, lr: f64, batch: usize, k: usize, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    // capacity-limited global path: 4 stages, stride-16 grid (4x4 cells)
    cfg.model.global.backbone_channels = vec![16, 32, 64, 64];
    cfg.model.global.downsample_factor = 16;
    cfg.model.patch.num_patches = k;
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg.optimizer.lr = lr;
    cfg.batch_size = batch;
    cfg
}

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let epochs: usize = a.get(1).and_then(|s| s.parse().ok()).unwrap_or(9);
    let lr: f64 = a.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.5e-4);
    let batch: usize = a.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let k: usize = a.get(4).and_then(|s| s.parse().ok()).unwrap_or(4);
    let seed: u64 = a.get(5).and_then(|s| s.parse().ok()).unwrap_or(7);

    let dataset = synthesize(&SyntheticConfig { samples_per_class: 334, seed, ..SyntheticConfig::default() }).unwrap();
    for mode in [AblationMode::GlobalOnly, AblationMode::Full] {
        let mut cfg = acceptance_config(epochs, lr, batch, k, seed);
        cfg.ablation = mode;
        let dir = std::env::temp_dir().join(format!("ugpl_d4_{}", mode.name()));
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
            "{:<12} {:>4.0}s best_ep {} | fused {:.4} global {:.4} local {:.4} | w_g {:.2}",
            mode.name(), t0.elapsed().as_secs_f64(), outcome.best_epoch,
            report.fused.accuracy, report.global.accuracy, report.local.accuracy, report.mean_w_g
        );
        println!("  per-class fused {:?} global {:?} local {:?}",
            per_class_acc(&labels, &f), per_class_acc(&labels, &g), per_class_acc(&labels, &l));
    }
}
