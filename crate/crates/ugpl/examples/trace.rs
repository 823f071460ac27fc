use ugpl::config::RunConfig;
use ugpl::data::{synthesize, SyntheticConfig};
use ugpl::pipeline::AblationMode;
use ugpl::trainer::{train, TrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2.5e-4);
    let batch: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let wd: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let mode = match args.get(5).map(|s| s.as_str()) {
        Some("global_only") => AblationMode::GlobalOnly,
        _ => AblationMode::Full,
    };
    let seed: u64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(7);

    let dataset = synthesize(&SyntheticConfig { samples_per_class: 334, seed, ..SyntheticConfig::default() }).unwrap();
    let mut cfg = RunConfig::default();
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg.optimizer.lr = lr;
    cfg.optimizer.weight_decay = wd;
    cfg.batch_size = batch;
    cfg.ablation = mode;
    let dir = std::env::temp_dir().join("ugpl_trace");
    std::fs::remove_dir_all(&dir).ok();
    let opts = TrainOptions { quiet: false, track_val_accuracy: true, threads: 2, ..TrainOptions::new(&dir) };
    let t0 = std::time::Instant::now();
    let (_, _, outcome) = train(&cfg, &dataset, &opts).unwrap();
    println!("total {:.0}s best_ep {}", t0.elapsed().as_secs_f64(), outcome.best_epoch);
    std::fs::remove_dir_all(&dir).ok();
}
