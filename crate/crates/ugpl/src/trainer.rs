//! Training and evaluation harness.
//!
//! Per batch, each sample builds its own tape (augment → standardize →
//! pipeline forward → loss → backward). Samples are independent graphs, so
//! batches can run on a small thread pool; gradients, batch-norm statistics
//! and logged losses are reduced in a fixed order, so a run is reproducible
//! for a given mode and thread count. `deterministic` forces the fully
//! sequential path whose logs are the normative bit-exact artifact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::autograd::{BnBatchStats, Tape};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{augment, Dataset, Split};
use crate::error::RunError;
use crate::layers::Phase;
use crate::losses::LossBreakdown;
use crate::metrics::{build_report, MetricsReport};
use crate::optim::{cosine_lr, Adam};
use crate::params::ParamStore;
use crate::pipeline::{sample_losses, PredictionBundle, UgplModel};
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Force fully sequential execution (bit-exact reference mode).
    pub deterministic: bool,
    /// Worker threads for the parallel path.
    pub threads: usize,
    pub quiet: bool,
    /// Also report validation accuracy each epoch (diagnostic; slower).
    pub track_val_accuracy: bool,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        TrainOptions {
            out_dir: out_dir.into(),
            deterministic: false,
            threads: 2,
            quiet: false,
            track_val_accuracy: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub train_seconds: f64,
}

#[derive(Serialize)]
struct LogRecord<'a> {
    epoch: usize,
    step: usize,
    lr: f64,
    loss: &'a LossBreakdown,
}

/// Build the model and its parameter store from a config, seeded by
/// (seed, "init").
pub fn build_model(cfg: &RunConfig) -> Result<(ParamStore, UgplModel), RunError> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = RngState::with_stream(cfg.seed, "init");
    let model = UgplModel::new(
        &mut store,
        cfg.model.global.clone(),
        cfg.model.local.clone(),
        cfg.model.fusion.clone(),
        cfg.model.patch.clone(),
        &mut rng,
    )?;
    Ok((store, model))
}

pub fn standardize(image: &Tensor, normalization: (f64, f64)) -> Tensor {
    let (mean, std) = normalization;
    let data = image.data().iter().map(|v| (v - mean) / std).collect();
    Tensor::new(image.shape().to_vec(), data).unwrap()
}

/// Per-sample training work product.
struct SampleWork {
    breakdown: LossBreakdown,
    bn_stats: Vec<BnBatchStats>,
}

fn train_one_sample(
    model: &UgplModel,
    store: &ParamStore,
    cfg: &RunConfig,
    dataset: &Dataset,
    epoch: usize,
    index: usize,
    grads: &mut [Tensor],
) -> Result<SampleWork, RunError> {
    let root = RngState::with_stream(cfg.seed, "train");
    let sample = &dataset.samples[index];
    let mut aug_rng = root.fork("augment", &[epoch as u64, index as u64]);
    let augmented = augment(sample, &mut aug_rng);
    let image = standardize(&augmented.image, dataset.normalization);
    let mut extract_rng = root.fork("extract", &[epoch as u64, index as u64]);
    let tape = Tape::new();
    let fwd = model.forward_sample(
        &tape,
        store,
        &image,
        cfg.ablation,
        Phase::Train,
        &mut extract_rng,
    )?;
    let (total, breakdown) = sample_losses(&tape, &fwd, sample.label, &cfg.loss_weights)?;
    tape.backward(total)?;
    tape.accumulate_param_grads(grads);
    Ok(SampleWork {
        breakdown,
        bn_stats: tape.take_bn_stats(),
    })
}

/// Process one batch; returns summed grads and per-position work, reduced in
/// batch order.
fn run_batch(
    model: &UgplModel,
    store: &ParamStore,
    cfg: &RunConfig,
    dataset: &Dataset,
    epoch: usize,
    batch: &[usize],
    opts: &TrainOptions,
) -> Result<(Vec<Tensor>, Vec<SampleWork>), RunError> {
    let threads = if opts.deterministic { 1 } else { opts.threads.max(1) };
    if threads == 1 || batch.len() == 1 {
        let mut grads = store.zero_grads();
        let mut works = Vec::with_capacity(batch.len());
        for &index in batch {
            works.push(train_one_sample(
                model, store, cfg, dataset, epoch, index, &mut grads,
            )?);
        }
        return Ok((grads, works));
    }

    let chunk = batch.len().div_ceil(threads);
    let chunks: Vec<&[usize]> = batch.chunks(chunk).collect();
    let results: Vec<Result<(Vec<Tensor>, Vec<SampleWork>), RunError>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|&chunk_indices| {
                    scope.spawn(move || {
                        let mut grads = store.zero_grads();
                        let mut works = Vec::with_capacity(chunk_indices.len());
                        for &index in chunk_indices {
                            works.push(train_one_sample(
                                model, store, cfg, dataset, epoch, index, &mut grads,
                            )?);
                        }
                        Ok((grads, works))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("training worker panicked"))
                .collect()
        });

    let mut total_grads: Option<Vec<Tensor>> = None;
    let mut works = Vec::with_capacity(batch.len());
    for result in results {
        let (grads, mut chunk_works) = result?;
        match &mut total_grads {
            None => total_grads = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
        works.append(&mut chunk_works);
    }
    Ok((total_grads.unwrap(), works))
}

fn apply_bn_stats(store: &mut ParamStore, works: &[SampleWork]) {
    for work in works {
        for stat in &work.bn_stats {
            let mean = store.buffer_mut(stat.mean_buf);
            for (r, &b) in mean.data_mut().iter_mut().zip(&stat.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            let var = store.buffer_mut(stat.var_buf);
            for (r, &b) in var.data_mut().iter_mut().zip(&stat.var_unbiased) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

fn mean_breakdown(works: &[SampleWork], cfg: &RunConfig) -> LossBreakdown {
    let n = works.len() as f64;
    let mut comps = [0.0f64; 7];
    for w in works {
        for (acc, c) in comps.iter_mut().zip(w.breakdown.components()) {
            *acc += c;
        }
    }
    for c in &mut comps {
        *c /= n;
    }
    LossBreakdown::from_components(comps, cfg.loss_weights)
}

/// Mean validation total loss in eval mode (no augmentation). The epoch
/// index addresses the extraction rng stream.
pub fn validation_loss(
    model: &UgplModel,
    store: &ParamStore,
    cfg: &RunConfig,
    dataset: &Dataset,
    epoch: usize,
) -> Result<f64, RunError> {
    let root = RngState::with_stream(cfg.seed, "val");
    let mut total = 0.0;
    let indices = dataset.indices(Split::Val);
    for &index in indices {
        let sample = &dataset.samples[index];
        let image = standardize(&sample.image, dataset.normalization);
        let mut rng = root.fork("extract", &[epoch as u64, index as u64]);
        let tape = Tape::new();
        let fwd =
            model.forward_sample(&tape, store, &image, cfg.ablation, Phase::Eval, &mut rng)?;
        let (_, breakdown) = sample_losses(&tape, &fwd, sample.label, &cfg.loss_weights)?;
        total += breakdown.total;
    }
    Ok(total / indices.len() as f64)
}

/// Full training loop with cosine schedule and early stopping on validation
/// loss. Saves the best-validation checkpoint and a sidecar config, leaves
/// the store holding the best weights, and writes a JSON-lines log with one
/// record per optimizer step.
pub fn train(
    cfg: &RunConfig,
    dataset: &Dataset,
    opts: &TrainOptions,
) -> Result<(ParamStore, UgplModel, TrainOutcome), RunError> {
    let started = Instant::now();
    cfg.validate()?;
    if dataset.num_classes() != cfg.model.global.num_classes {
        return Err(RunError::Config(format!(
            "dataset has {} classes, config expects {}",
            dataset.num_classes(),
            cfg.model.global.num_classes
        )));
    }
    fs::create_dir_all(&opts.out_dir)
        .map_err(|e| RunError::io(opts.out_dir.display().to_string(), e))?;
    let ckpt_path = opts.out_dir.join("model.ckpt");
    let log_path = opts.out_dir.join("train_log.jsonl");
    cfg.to_json_file(&opts.out_dir.join("config.json"))?;

    let (mut store, model) = build_model(cfg)?;
    let mut optimizer = Adam::new(cfg.optimizer, &store);
    let log_file =
        fs::File::create(&log_path).map_err(|e| RunError::io(log_path.display().to_string(), e))?;
    let mut log = std::io::BufWriter::new(log_file);

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0usize;
    let mut epochs_run = 0;
    let shuffle_root = RngState::with_stream(cfg.seed, "shuffle");

    for epoch in 0..cfg.epochs {
        epochs_run = epoch + 1;
        let lr = cosine_lr(cfg.optimizer.lr, epoch, cfg.epochs);
        let mut order: Vec<usize> = dataset.indices(Split::Train).to_vec();
        let mut shuffle_rng = shuffle_root.fork("epoch", &[epoch as u64]);
        shuffle_rng.shuffle(&mut order);

        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (mut grads, works) = run_batch(model_ref(&model), &store, cfg, dataset, epoch, batch, opts)?;
            let breakdown = mean_breakdown(&works, cfg);
            if !breakdown.is_finite() {
                return Err(RunError::Diverged { epoch, batch: step });
            }
            let inv = 1.0 / batch.len() as f64;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            apply_bn_stats(&mut store, &works);
            optimizer.step(&mut store, &grads, lr);
            let record = LogRecord {
                epoch,
                step,
                lr,
                loss: &breakdown,
            };
            serde_json::to_writer(&mut log, &record)?;
            log.write_all(b"\n")
                .map_err(|e| RunError::io(log_path.display().to_string(), e))?;
        }

        let val_loss = validation_loss(&model, &store, cfg, dataset, epoch)?;
        if !opts.quiet {
            let acc = if opts.track_val_accuracy {
                let (report, _) = evaluate(cfg, &model, &store, dataset, Split::Val)?;
                format!(
                    "  val_acc {:.4} (g {:.4} l {:.4})",
                    report.fused.accuracy, report.global.accuracy, report.local.accuracy
                )
            } else {
                String::new()
            };
            println!(
                "epoch {epoch:>3}  lr {lr:.3e}  val_loss {val_loss:.6}{acc}{}",
                if val_loss < best_val { "  *" } else { "" }
            );
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            since_best = 0;
            checkpoint::save(&store, &ckpt_path)?;
        } else {
            since_best += 1;
            if since_best >= cfg.early_stopping_patience {
                break;
            }
        }
    }
    log.flush()
        .map_err(|e| RunError::io(log_path.display().to_string(), e))?;

    // leave the store at the best-validation weights
    checkpoint::load_into(&mut store, &ckpt_path)?;
    let outcome = TrainOutcome {
        best_val_loss: best_val,
        best_epoch,
        epochs_run,
        checkpoint: ckpt_path,
        log: log_path,
        train_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((store, model, outcome))
}

fn model_ref(model: &UgplModel) -> &UgplModel {
    model
}

/// Per-sample evaluation record (one CSV row).
#[derive(Debug, Clone, Serialize)]
pub struct SampleRecord {
    pub id: String,
    pub label: usize,
    pub global_pred: usize,
    pub local_pred: usize,
    pub fused_pred: usize,
    pub u_g: f64,
    pub w_g: f64,
    pub fused_scores: Vec<f64>,
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.iter().map(|e| e / s).collect()
}

/// Evaluate a split, producing the metrics report and per-sample records.
pub fn evaluate(
    cfg: &RunConfig,
    model: &UgplModel,
    store: &ParamStore,
    dataset: &Dataset,
    split: Split,
) -> Result<(MetricsReport, Vec<SampleRecord>), RunError> {
    let root = RngState::with_stream(cfg.seed, "eval");
    let mut labels = Vec::new();
    let mut global_preds = Vec::new();
    let mut local_preds = Vec::new();
    let mut fused_preds = Vec::new();
    let mut u_gs = Vec::new();
    let mut w_gs = Vec::new();
    let mut records = Vec::new();
    for &index in dataset.indices(split) {
        let sample = &dataset.samples[index];
        let image = standardize(&sample.image, dataset.normalization);
        let mut rng = root.fork("extract", &[index as u64]);
        let bundle: PredictionBundle = model.predict(store, &image, cfg.ablation, &mut rng)?;
        labels.push(sample.label);
        global_preds.push(bundle.global_pred());
        local_preds.push(bundle.local_pred());
        fused_preds.push(bundle.fused_pred());
        u_gs.push(bundle.u_g);
        w_gs.push(bundle.w_g);
        records.push(SampleRecord {
            id: sample.id.clone(),
            label: sample.label,
            global_pred: bundle.global_pred(),
            local_pred: bundle.local_pred(),
            fused_pred: bundle.fused_pred(),
            u_g: bundle.u_g,
            w_g: bundle.w_g,
            fused_scores: softmax(&bundle.fused_logits),
        });
    }
    let report = build_report(
        &labels,
        &global_preds,
        &local_preds,
        &fused_preds,
        &u_gs,
        &w_gs,
        dataset.num_classes(),
    );
    Ok((report, records))
}

/// Write the per-sample CSV next to the metrics JSON.
pub fn write_sample_csv(path: &Path, records: &[SampleRecord]) -> Result<(), RunError> {
    let classes = records.first().map(|r| r.fused_scores.len()).unwrap_or(0);
    let mut body = String::from("id,label,global_pred,local_pred,fused_pred,u_g,w_g");
    for c in 0..classes {
        body.push_str(&format!(",score_{c}"));
    }
    body.push('\n');
    for r in records {
        body.push_str(&format!(
            "{},{},{},{},{},{},{}",
            r.id, r.label, r.global_pred, r.local_pred, r.fused_pred, r.u_g, r.w_g
        ));
        for s in &r.fused_scores {
            body.push_str(&format!(",{s}"));
        }
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| RunError::io(path.display().to_string(), e))
}
