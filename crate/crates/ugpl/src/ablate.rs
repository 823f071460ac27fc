//! Ablation runner: trains and evaluates the four pipeline variants
//! (global-only, random-map, fixed-grid, full) on one dataset, plus an
//! optional patch-size × patch-count sweep, and writes a comparative report.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::RunError;
use crate::pipeline::AblationMode;
use crate::trainer::{evaluate, train, TrainOptions};

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub mode: String,
    pub status: String,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub global_accuracy: f64,
    pub local_accuracy: f64,
    pub fused_accuracy: f64,
    pub train_seconds: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub patch_size: usize,
    pub num_patches: usize,
    pub status: String,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub sweep: Vec<SweepRow>,
}

fn train_and_score(
    cfg: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<(f64, f64, f64, f64, f64, f64, usize), RunError> {
    let run_opts = TrainOptions {
        out_dir: out_dir.to_path_buf(),
        ..opts.clone()
    };
    let (store, model, outcome) = train(cfg, dataset, &run_opts)?;
    let (report, _) = evaluate(cfg, &model, &store, dataset, Split::Test)?;
    Ok((
        report.accuracy,
        report.macro_f1,
        report.global.accuracy,
        report.local.accuracy,
        report.fused.accuracy,
        outcome.train_seconds,
        outcome.best_epoch,
    ))
}

/// Train the four ablation modes and optionally the patch sweep; write
/// `ablation.json`, `ablation.csv` and (with sweep) `sweep.csv` to `out_dir`.
pub fn run_ablation(
    base: &RunConfig,
    dataset: &Dataset,
    out_dir: &Path,
    opts: &TrainOptions,
    sweep: bool,
) -> Result<AblationReport, RunError> {
    fs::create_dir_all(out_dir).map_err(|e| RunError::io(out_dir.display().to_string(), e))?;
    let mut rows = Vec::new();
    for mode in AblationMode::all() {
        let mut cfg = base.clone();
        cfg.ablation = mode;
        let run_dir = out_dir.join(format!("run_{}", mode.name()));
        if !opts.quiet {
            println!("== ablation mode {} ==", mode.name());
        }
        let (accuracy, macro_f1, global_acc, local_acc, fused_acc, secs, best_epoch) =
            train_and_score(&cfg, dataset, &run_dir, opts)?;
        rows.push(AblationRow {
            mode: mode.name().to_string(),
            status: "ok".to_string(),
            accuracy,
            macro_f1,
            global_accuracy: global_acc,
            local_accuracy: local_acc,
            fused_accuracy: fused_acc,
            train_seconds: secs,
            best_epoch,
        });
    }

    let mut sweep_rows = Vec::new();
    if sweep {
        for &p in &[8usize, 16, 24] {
            for &k in &[2usize, 3, 4] {
                let mut cfg = base.clone();
                cfg.ablation = AblationMode::Full;
                cfg.model.patch.patch_size = p;
                cfg.model.patch.num_patches = k;
                cfg.model.patch.margin = p / 4;
                cfg.model.patch.gaussian_sigma = p as f64 / 2.0;
                let row = match cfg.validate() {
                    Err(e) => SweepRow {
                        patch_size: p,
                        num_patches: k,
                        status: format!("error: {e}"),
                        accuracy: f64::NAN,
                        macro_f1: f64::NAN,
                    },
                    Ok(()) => {
                        if !opts.quiet {
                            println!("== sweep P={p} K={k} ==");
                        }
                        let run_dir = out_dir.join(format!("sweep_p{p}_k{k}"));
                        let (accuracy, macro_f1, ..) =
                            train_and_score(&cfg, dataset, &run_dir, opts)?;
                        SweepRow {
                            patch_size: p,
                            num_patches: k,
                            status: "ok".to_string(),
                            accuracy,
                            macro_f1,
                        }
                    }
                };
                sweep_rows.push(row);
            }
        }
    }

    let report = AblationReport {
        rows,
        sweep: sweep_rows,
    };
    let json_path = out_dir.join("ablation.json");
    fs::write(&json_path, serde_json::to_string_pretty(&report)?)
        .map_err(|e| RunError::io(json_path.display().to_string(), e))?;

    let mut csv = String::from(
        "mode,status,accuracy,macro_f1,global_accuracy,local_accuracy,fused_accuracy,train_seconds,best_epoch\n",
    );
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.status,
            r.accuracy,
            r.macro_f1,
            r.global_accuracy,
            r.local_accuracy,
            r.fused_accuracy,
            r.train_seconds,
            r.best_epoch
        ));
    }
    let csv_path = out_dir.join("ablation.csv");
    fs::write(&csv_path, csv).map_err(|e| RunError::io(csv_path.display().to_string(), e))?;

    if sweep {
        let mut csv = String::from("patch_size,num_patches,status,accuracy,macro_f1\n");
        for r in &report.sweep {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                r.patch_size, r.num_patches, r.status, r.accuracy, r.macro_f1
            ));
        }
        let path = out_dir.join("sweep.csv");
        fs::write(&path, csv).map_err(|e| RunError::io(path.display().to_string(), e))?;
    }
    Ok(report)
}
