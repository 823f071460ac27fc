use ugpl::config::RunConfig;
use ugpl::data::{synthesize, SyntheticConfig};
use ugpl::trainer::{train, TrainOptions};

fn main() {
    let dataset = synthesize(&SyntheticConfig {
        samples_per_class: 20, // 36 train samples
        seed: 1,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.epochs = 1;
    cfg.batch_size = 32;
    let dir = std::env::temp_dir().join("ugpl_bench");
    std::fs::remove_dir_all(&dir).ok();
    let t0 = std::time::Instant::now();
    let opts = TrainOptions { quiet: true, threads: 2, ..TrainOptions::new(&dir) };
    train(&cfg, &dataset, &opts).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    // 36 train + 12 val samples
    println!("1 epoch on 36 train + 12 val samples: {dt:.2}s -> {:.1} ms/train-sample (fwd+bwd incl. val fwd)", dt / 36.0 * 1000.0);
    println!("projected: 360 train + 120 val per epoch = {:.1}s/epoch", dt * 10.0);
    std::fs::remove_dir_all(&dir).ok();
}
