use ugpl::config::RunConfig;
use ugpl::data::{synthesize, Split, SyntheticConfig};
use ugpl::layers::Phase;
use ugpl::autograd::Tape;
use ugpl::pipeline::AblationMode;
use ugpl::rng::RngState;
use ugpl::trainer::{evaluate, standardize, train, TrainOptions};

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let epochs: usize = a.get(1).and_then(|s| s.parse().ok()).unwrap_or(9);
    let lr: f64 = a.get(2).and_then(|s| s.parse().ok()).unwrap_or(1.5e-4);
    let k: usize = a.get(3).and_then(|s| s.parse().ok()).unwrap_or(4);
    let seed: u64 = 7;

    let dataset = synthesize(&SyntheticConfig { samples_per_class: 334, seed, ..SyntheticConfig::default() }).unwrap();
    let mut cfg = RunConfig::default();
    cfg.epochs = epochs;
    cfg.seed = seed;
    cfg.optimizer.lr = lr;
    cfg.batch_size = 16;
    cfg.model.patch.num_patches = k;
    cfg.ablation = AblationMode::Full;
    let dir = std::env::temp_dir().join("ugpl_inspect");
    std::fs::remove_dir_all(&dir).ok();
    let opts = TrainOptions { quiet: true, threads: 2, ..TrainOptions::new(&dir) };
    let (store, model, _) = train(&cfg, &dataset, &opts).unwrap();

    // per-class u_g, w_g means
    let (_, records) = evaluate(&cfg, &model, &store, &dataset, Split::Test).unwrap();
    for class in 0..3 {
        let rs: Vec<_> = records.iter().filter(|r| r.label == class).collect();
        let mu: f64 = rs.iter().map(|r| r.u_g).sum::<f64>() / rs.len() as f64;
        let mw: f64 = rs.iter().map(|r| r.w_g).sum::<f64>() / rs.len() as f64;
        println!("class {class}: mean u_g {mu:.3} mean w_g {mw:.3}");
    }

    // patch placement for two test samples per class
    for class in 0..3 {
        let test_idx: Vec<usize> = dataset.indices(Split::Test).iter().copied()
            .filter(|&i| dataset.samples[i].label == class).take(2).collect();
        for idx in test_idx {
            let s = &dataset.samples[idx];
            let img = standardize(&s.image, dataset.normalization);
            let tape = Tape::new();
            let mut rng = RngState::with_stream(99, "inspect");
            let fwd = model.forward_sample(&tape, &store, &img, AblationMode::Full, Phase::Eval, &mut rng).unwrap();
            let umap = tape.value(fwd.umap.normalized);
            let coords = &fwd.patches.as_ref().unwrap().coords;
            println!("sample {} (class {class}): patch top-lefts {:?}", s.id, coords);
            for y in 0..8 {
                let row: Vec<String> = (0..8).map(|x| format!("{:3.0}", umap.at(&[y, x]) * 99.0)).collect();
                println!("    {}", row.join(" "));
            }
        }
    }
}
