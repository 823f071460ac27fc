use ugpl::config::RunConfig;
use ugpl::data::{synthesize, Split, SyntheticConfig};
use ugpl::pipeline::AblationMode;
use ugpl::trainer::{evaluate, train, TrainOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);

    let dataset = synthesize(&SyntheticConfig {
        samples_per_class: 334, // 200 train, 66 val, 68 test per class -> 600/198/204
        seed,
        ..SyntheticConfig::default()
    })
    .unwrap();
    println!(
        "dataset: {} train / {} val / {} test",
        dataset.indices(Split::Train).len(),
        dataset.indices(Split::Val).len(),
        dataset.indices(Split::Test).len()
    );

    let mut base = RunConfig::default();
    base.epochs = epochs;
    base.seed = seed;

    for mode in [AblationMode::Full, AblationMode::GlobalOnly] {
        let mut cfg = base.clone();
        cfg.ablation = mode;
        let dir = std::env::temp_dir().join(format!("ugpl_dir_{}", mode.name()));
        std::fs::remove_dir_all(&dir).ok();
        let t0 = std::time::Instant::now();
        let opts = TrainOptions { quiet: true, threads: 2, ..TrainOptions::new(&dir) };
        let (store, model, outcome) = train(&cfg, &dataset, &opts).unwrap();
        let (report, _) = evaluate(&cfg, &model, &store, &dataset, Split::Test).unwrap();
        println!(
            "{:<12} {:>5.1}s  best_ep {:<2} | fused {:.4} global {:.4} local {:.4} | mean_u_g {:.3} mean_w_g {:.3}",
            mode.name(),
            t0.elapsed().as_secs_f64(),
            outcome.best_epoch,
            report.fused.accuracy,
            report.global.accuracy,
            report.local.accuracy,
            report.mean_u_g,
            report.mean_w_g,
        );
        std::fs::remove_dir_all(&dir).ok();
    }
}
