//! Command-line interface: synth / train / eval / ablate / gradcheck /
//! extract-patches.
//!
//! Exit codes: 0 success, 1 usage error (bad arguments, missing inputs),
//! 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablate::run_ablation;
use crate::autograd::gradcheck::DEFAULT_STEP;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load_dataset, synthesize, write_dataset, Split, SyntheticConfig};
use crate::error::RunError;
use crate::patch::extract_patches;
use crate::pgm;
use crate::rng::RngState;
use crate::trainer::{build_model, evaluate, train, write_sample_csv, TrainOptions};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser)]
#[command(
    name = "ugpl",
    about = "Uncertainty-guided progressive learning: synthetic data, training, evaluation, ablations"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic three-class dataset
    Synth(SynthArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Run the component ablation (and optionally the patch sweep)
    Ablate(AblateArgs),
    /// Verify gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Extract uncertainty-guided patches from an image + map pair
    ExtractPatches(ExtractArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Fully sequential bit-exact mode
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 2)]
    threads: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Defaults to the config.json beside the checkpoint
    #[arg(long)]
    config: Option<PathBuf>,
    /// Defaults to the checkpoint's directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also run the patch-size × patch-count sweep
    #[arg(long)]
    sweep: bool,
    #[arg(long)]
    deterministic: bool,
    #[arg(long, default_value_t = 2)]
    threads: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 4)]
    probes_per_param: usize,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// A usage-level problem (exit 1) as opposed to a runtime failure (exit 2).
#[derive(Debug)]
pub struct UsageError(pub String);

fn require_dir(path: &Path, what: &str) -> Result<(), UsageError> {
    if !path.is_dir() {
        return Err(UsageError(format!(
            "{what} directory {} does not exist.\nRun `ugpl --help` for usage.",
            path.display()
        )));
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<(), UsageError> {
    if !path.is_file() {
        return Err(UsageError(format!(
            "{what} file {} does not exist.\nRun `ugpl --help` for usage.",
            path.display()
        )));
    }
    Ok(())
}

fn load_config(explicit: &Option<PathBuf>, fallback: Option<PathBuf>) -> Result<RunConfig, UsageError> {
    let path = match (explicit, fallback) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(p)) if p.is_file() => Some(p),
        (None, _) => None,
    };
    let mut cfg = match path {
        Some(p) => {
            require_file(&p, "config")?;
            RunConfig::from_json_file(&p).map_err(|e| UsageError(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    cfg.apply_env_seed().map_err(|e| UsageError(e.to_string()))?;
    cfg.validate().map_err(|e| UsageError(e.to_string()))?;
    Ok(cfg)
}

fn parse_split(raw: &str) -> Result<Split, UsageError> {
    match raw {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(UsageError(format!(
            "unknown split {other:?}; expected train, val or test"
        ))),
    }
}

/// Run the CLI; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(DispatchError::Usage(u)) => {
            eprintln!("error: {}", u.0);
            EXIT_USAGE
        }
        Err(DispatchError::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

enum DispatchError {
    Usage(UsageError),
    Runtime(RunError),
}

impl From<UsageError> for DispatchError {
    fn from(u: UsageError) -> Self {
        DispatchError::Usage(u)
    }
}

impl From<RunError> for DispatchError {
    fn from(e: RunError) -> Self {
        DispatchError::Runtime(e)
    }
}

fn dispatch(cli: Cli) -> Result<(), DispatchError> {
    match cli.command {
        Command::Synth(args) => {
            let mut cfg = SyntheticConfig {
                samples_per_class: args.per_class,
                seed: args.seed,
                ..SyntheticConfig::default()
            };
            if let Ok(raw) = std::env::var("UGPL_SEED") {
                cfg.seed = raw
                    .parse()
                    .map_err(|_| UsageError(format!("UGPL_SEED {raw:?} is not a u64")))?;
            }
            let dataset = synthesize(&cfg).map_err(RunError::Data)?;
            write_dataset(&dataset, &cfg, &args.out).map_err(RunError::Data)?;
            println!(
                "wrote {} samples ({} per class) to {}",
                dataset.samples.len(),
                args.per_class,
                args.out.display()
            );
            Ok(())
        }
        Command::Train(args) => {
            require_dir(&args.data, "data")?;
            let cfg = load_config(&args.config, None)?;
            let dataset =
                load_dataset(&args.data, Some(cfg.model.global.input_size)).map_err(RunError::Data)?;
            let opts = TrainOptions {
                deterministic: args.deterministic,
                threads: args.threads,
                ..TrainOptions::new(args.out.clone())
            };
            let (store, model, outcome) = train(&cfg, &dataset, &opts)?;
            let (report, records) = evaluate(&cfg, &model, &store, &dataset, Split::Val)?;
            let metrics_path = args.out.join("metrics_val.json");
            std::fs::write(&metrics_path, serde_json::to_string_pretty(&report).map_err(RunError::Json)?)
                .map_err(|e| RunError::io(metrics_path.display().to_string(), e))?;
            write_sample_csv(&args.out.join("per_sample_val.csv"), &records)?;
            println!(
                "best val loss {:.6} at epoch {} ({} epochs, {:.1}s); checkpoint {}",
                outcome.best_val_loss,
                outcome.best_epoch,
                outcome.epochs_run,
                outcome.train_seconds,
                outcome.checkpoint.display()
            );
            Ok(())
        }
        Command::Eval(args) => {
            require_file(&args.checkpoint, "checkpoint")?;
            require_dir(&args.data, "data")?;
            let split = parse_split(&args.split)?;
            let sidecar = args.checkpoint.parent().map(|d| d.join("config.json"));
            let cfg = load_config(&args.config, sidecar)?;
            let dataset =
                load_dataset(&args.data, Some(cfg.model.global.input_size)).map_err(RunError::Data)?;
            let (mut store, model) = build_model(&cfg)?;
            checkpoint::load_into(&mut store, &args.checkpoint)?;
            let (report, records) = evaluate(&cfg, &model, &store, &dataset, split)?;
            let out_dir = args
                .out
                .clone()
                .or_else(|| args.checkpoint.parent().map(Path::to_path_buf))
                .unwrap_or_else(|| PathBuf::from("."));
            std::fs::create_dir_all(&out_dir)
                .map_err(|e| RunError::io(out_dir.display().to_string(), e))?;
            let json = serde_json::to_string_pretty(&report).map_err(RunError::Json)?;
            let metrics_path = out_dir.join(format!("metrics_{}.json", args.split));
            std::fs::write(&metrics_path, &json)
                .map_err(|e| RunError::io(metrics_path.display().to_string(), e))?;
            write_sample_csv(&out_dir.join(format!("per_sample_{}.csv", args.split)), &records)?;
            println!("{json}");
            Ok(())
        }
        Command::Ablate(args) => {
            require_dir(&args.data, "data")?;
            let cfg = load_config(&args.config, None)?;
            let dataset =
                load_dataset(&args.data, Some(cfg.model.global.input_size)).map_err(RunError::Data)?;
            let opts = TrainOptions {
                deterministic: args.deterministic,
                threads: args.threads,
                ..TrainOptions::new(args.out.clone())
            };
            let report = run_ablation(&cfg, &dataset, &args.out, &opts, args.sweep)?;
            for row in &report.rows {
                println!(
                    "{:<14} acc {:.4}  macro_f1 {:.4}  ({})",
                    row.mode, row.accuracy, row.macro_f1, row.status
                );
            }
            for row in &report.sweep {
                println!(
                    "P={:<3} K={} acc {:.4} macro_f1 {:.4} ({})",
                    row.patch_size, row.num_patches, row.accuracy, row.macro_f1, row.status
                );
            }
            Ok(())
        }
        Command::Gradcheck(args) => {
            if args.tol <= 0.0 {
                return Err(UsageError("tol must be positive".into()).into());
            }
            let reports = verify::gradcheck_suite(DEFAULT_STEP, args.tol, args.probes_per_param)?;
            for r in &reports {
                println!("{}", r.summary());
            }
            if verify::all_pass(&reports) {
                println!("gradcheck: all {} checks passed", reports.len());
                Ok(())
            } else {
                Err(RunError::Config("gradient check failed".into()).into())
            }
        }
        Command::ExtractPatches(args) => {
            require_file(&args.image, "image")?;
            require_file(&args.map, "map")?;
            let cfg = load_config(&args.config, None)?;
            let image = pgm::read_pgm(&args.image).map_err(RunError::Data)?;
            let (h, w) = (image.shape()[0], image.shape()[1]);
            let image = image.reshaped(vec![h, w, 1]).unwrap();
            let map = pgm::read_pgm(&args.map).map_err(RunError::Data)?;
            let mut rng = RngState::with_stream(cfg.seed, "extract-cli");
            let set = extract_patches(&image, &map, &cfg.model.patch, &mut rng)
                .map_err(RunError::Tensor)?;
            std::fs::create_dir_all(&args.out)
                .map_err(|e| RunError::io(args.out.display().to_string(), e))?;
            let mut csv = String::from("x,y,score,fallback\n");
            for (i, patch) in set.patches.iter().enumerate() {
                let path = args.out.join(format!("patch_{i}.pgm"));
                pgm::write_pgm(&path, patch).map_err(RunError::Data)?;
                let (x, y) = set.coords[i];
                csv.push_str(&format!(
                    "{x},{y},{},{}\n",
                    set.scores[i], set.fallback_used[i]
                ));
            }
            let csv_path = args.out.join("coordinates.csv");
            std::fs::write(&csv_path, csv)
                .map_err(|e| RunError::io(csv_path.display().to_string(), e))?;
            println!("wrote {} patches to {}", set.patches.len(), args.out.display());
            Ok(())
        }
    }
}
