use ugpl::config::RunConfig;
use ugpl::data::{synthesize, SyntheticConfig};
use ugpl::pipeline::AblationMode;
use ugpl::trainer::{train, TrainOptions};

fn time_mode(mode: AblationMode, threads: usize) -> f64 {
    let dataset = synthesize(&SyntheticConfig {
        samples_per_class: 20,
        seed: 1,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.epochs = 1;
    cfg.ablation = mode;
    let dir = std::env::temp_dir().join(format!("ugpl_bench_{:?}_{threads}", mode));
    std::fs::remove_dir_all(&dir).ok();
    let t0 = std::time::Instant::now();
    let opts = TrainOptions { quiet: true, threads, ..TrainOptions::new(&dir) };
    train(&cfg, &dataset, &opts).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    std::fs::remove_dir_all(&dir).ok();
    dt
}

fn main() {
    println!("full 2t:        {:.2}s", time_mode(AblationMode::Full, 2));
    println!("full 1t:        {:.2}s", time_mode(AblationMode::Full, 1));
    println!("global_only 2t: {:.2}s", time_mode(AblationMode::GlobalOnly, 2));
}
