//! The `privpool` command line.
//!
//! Every command that writes an output directory also writes
//! `resolved_config.json` there: the config file merged with the flags, which
//! is enough to rerun the command.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed checks),
//! 2 usage error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::check::{run_suite, Suite};
use crate::data::{generate, Dataset, GenConfig, Split};
use crate::eval::{evaluate, export_attention, EvalOptions, DEFAULT_BOX_THRESHOLD};
use crate::experiment::with_overrides;
use crate::model::{Model, ModelConfig};
use crate::pooling::PoolMode;
use crate::train::{train, TrainConfig, CHECKPOINT_DIR, METRICS_FILE};
use crate::{Error, Real, Result};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "privpool", version, about = "Privileged pooling: train, evaluate and inspect keypoint-guided attention models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic biased dataset to disk.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus per-iteration metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Run numerical property suites.
    Check(CheckArgs),
    /// Export attention maps of random samples as PNG images.
    ExportAttention(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with generator settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of classes (default 8).
    #[arg(long)]
    pub classes: Option<usize>,
    /// Training images per class (default 20).
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Images per class in each validation and test split (default 25).
    #[arg(long)]
    pub eval_per_class: Option<usize>,
    /// Image side in pixels (default 64).
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Probability that a cis image shows its class's own context (default 0.9).
    #[arg(long)]
    pub bias: Option<f64>,
    /// Generator seed (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fraction of training images with keypoint annotations (default 1).
    #[arg(long)]
    pub kp_frac: Option<f64>,
    /// Overwrite a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Pooling mode: avg, avg_pr, cov or cov_pr (default avg_pr).
    #[arg(long, value_parser = parse_pool)]
    pub pool: Option<PoolMode>,
    /// Training epochs (default 30).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Seed of initialisation, shuffling and augmentation (default 0).
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file `{"model": {...}, "train": {...}}`; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base learning rate (default 0.01).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size (default 10).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Also save a checkpoint every this many epochs (0 = final only).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Train on unaugmented images.
    #[arg(long)]
    pub no_augment: bool,
    /// Drop the keypoint loss and regularise every attention map instead.
    #[arg(long)]
    pub no_keypoint_supervision: bool,
    /// Write 0 in the wall-clock column so reruns give identical metrics files.
    #[arg(long)]
    pub no_wall_time: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Split name: train, val_cis, val_trans, test_cis or test_trans.
    #[arg(long, value_parser = parse_split)]
    pub split: Split,
    /// Re-classify the crop around the mean attention and average the predictions.
    #[arg(long)]
    pub crop_refeed: bool,
    /// Box threshold as a fraction of the mean-attention maximum.
    #[arg(long, default_value_t = DEFAULT_BOX_THRESHOLD)]
    pub threshold: Real,
    /// Report directory; defaults to `eval-<split>` next to the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Suite to run: grad, sqrt, pool-identities or all.
    #[arg(long, value_parser = parse_suite, default_value = "all")]
    pub suite: Suite,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Split to sample from.
    #[arg(long, value_parser = parse_split)]
    pub split: Split,
    /// Number of samples; clamped to the split size.
    #[arg(long)]
    pub n: usize,
    /// Image directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the random sample selection.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Box threshold as a fraction of the mean-attention maximum.
    #[arg(long, default_value_t = DEFAULT_BOX_THRESHOLD)]
    pub threshold: Real,
}

fn parse_pool(s: &str) -> std::result::Result<PoolMode, String> {
    s.parse()
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse()
}

fn parse_suite(s: &str) -> std::result::Result<Suite, String> {
    s.parse()
}

/// Settings of a training run after merging the config file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunConfig {
    pub data: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunConfig {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub split: Split,
    pub options: EvalOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRunConfig {
    pub ckpt: PathBuf,
    pub data: PathBuf,
    pub split: Split,
    pub n: usize,
    pub seed: u64,
    pub threshold: Real,
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text)?;
    if !v.is_object() {
        return Err(Error::Config(format!("{} must contain a JSON object", path.display())));
    }
    Ok(v)
}

/// Flag values as a JSON object, skipping unset flags.
fn flags(pairs: &[(&str, Option<Value>)]) -> Value {
    Value::Object(
        pairs
            .iter()
            .filter_map(|(k, v)| v.clone().map(|v| (k.to_string(), v)))
            .collect(),
    )
}

fn write_resolved<T: Serialize>(dir: &Path, cfg: &T) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RESOLVED_CONFIG_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn resolve_gen_config(args: &GenDataArgs) -> Result<GenConfig> {
    let mut cfg = GenConfig::default();
    if let Some(path) = &args.config {
        cfg = with_overrides(&cfg, &read_json(path)?)?;
    }
    let over = flags(&[
        ("classes", args.classes.map(|v| json!(v))),
        ("per_class", args.per_class.map(|v| json!(v))),
        ("eval_per_class", args.eval_per_class.map(|v| json!(v))),
        ("image_size", args.image_size.map(|v| json!(v))),
        ("bias", args.bias.map(|v| json!(v))),
        ("seed", args.seed.map(|v| json!(v))),
        ("kp_frac", args.kp_frac.map(|v| json!(v))),
    ]);
    let cfg = with_overrides(&cfg, &over)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Model defaults take their class count and input size from the dataset.
pub fn resolve_train_config(args: &TrainArgs, dataset: &GenConfig) -> Result<TrainRunConfig> {
    let base = TrainRunConfig {
        data: args.data.clone(),
        model: ModelConfig {
            num_classes: dataset.classes,
            input_size: dataset.image_size,
            ..ModelConfig::default()
        },
        train: TrainConfig::default(),
    };
    let mut cfg = base;
    if let Some(path) = &args.config {
        let file = read_json(path)?;
        if let Some(k) = file.as_object().and_then(|o| o.keys().find(|k| *k != "model" && *k != "train")) {
            return Err(Error::Config(format!("unknown key '{k}' in {} (expected model, train)", path.display())));
        }
        cfg = with_overrides(&cfg, &file)?;
    }
    let over = json!({
        "model": flags(&[("pool", args.pool.map(|p| json!(p)))]),
        "train": flags(&[
            ("epochs", args.epochs.map(|v| json!(v))),
            ("seed", args.seed.map(|v| json!(v))),
            ("lr", args.lr.map(|v| json!(v))),
            ("batch", args.batch.map(|v| json!(v))),
            ("checkpoint_every", args.checkpoint_every.map(|v| json!(v))),
            ("augment", args.no_augment.then(|| json!(false))),
            ("log_wall_time", args.no_wall_time.then(|| json!(false))),
        ]),
    });
    let mut cfg: TrainRunConfig = with_overrides(&cfg, &over)?;
    if args.no_keypoint_supervision {
        cfg.train.loss.keypoint_supervision = false;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    if cfg.model.num_classes != dataset.classes || cfg.model.input_size != dataset.image_size {
        return Err(Error::Config(format!(
            "model expects {} classes at {}px but the dataset has {} classes at {}px",
            cfg.model.num_classes, cfg.model.input_size, dataset.classes, dataset.image_size
        )));
    }
    Ok(cfg)
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = resolve_gen_config(args)?;
    let manifest = generate(&cfg, &args.out, args.force)?;
    write_resolved(&args.out, &cfg)?;
    println!("wrote {} classes to {}", manifest.num_classes(), args.out.display());
    for s in &manifest.splits {
        println!("  {:<10} {:>5} samples, contexts {:?}", s.name, s.count, s.contexts);
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let dataset = Dataset::open(&args.data)?;
    let cfg = resolve_train_config(args, &dataset.manifest.config)?;
    write_resolved(&args.out, &cfg)?;
    let samples = dataset.load_split(Split::Train)?;
    let mut model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    println!(
        "training {} ({} parameters) on {} samples for {} epochs",
        cfg.model.pool,
        model.num_params(),
        samples.len(),
        cfg.train.epochs
    );
    let summary = train(&mut model, &samples, &cfg.train, Some(&args.out))?;
    println!(
        "{} iterations; ce {:.4} -> {:.4}; wrote {} and {}",
        summary.iterations,
        summary.head_mean(10, |l| l.ce),
        summary.tail_mean(10, |l| l.ce),
        args.out.join(METRICS_FILE).display(),
        args.out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = EvalRunConfig {
        ckpt: args.ckpt.clone(),
        data: args.data.clone(),
        split: args.split,
        options: EvalOptions {
            crop_refeed: args.crop_refeed,
            threshold_frac: args.threshold,
            ..EvalOptions::default()
        },
    };
    let model = Model::load(&cfg.ckpt)?;
    let dataset = Dataset::open(&cfg.data)?;
    let samples = dataset.load_split(cfg.split)?;
    let out = args.out.clone().unwrap_or_else(|| {
        let suffix = if cfg.options.crop_refeed { "-crop-refeed" } else { "" };
        cfg.ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{}{suffix}", cfg.split))
    });
    let report = evaluate(&model, &samples, cfg.split.as_str(), &cfg.options)?;
    write_resolved(&out, &cfg)?;
    report.write(&out, &dataset.manifest.classes)?;
    println!(
        "{}: top-1 {:.4}, mean per-class {:.4} over {} samples{}; wrote {}",
        report.split,
        report.top1,
        report.mean_per_class,
        report.n,
        if report.crop_refeed { " (crop-refeed)" } else { "" },
        out.display()
    );
    Ok(())
}

/// Returns whether every property passed.
fn cmd_check(args: &CheckArgs) -> Result<bool> {
    let outcomes = run_suite(args.suite)?;
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    Ok(failed == 0)
}

fn cmd_export(args: &ExportArgs) -> Result<()> {
    let cfg = ExportRunConfig {
        ckpt: args.ckpt.clone(),
        data: args.data.clone(),
        split: args.split,
        n: args.n,
        seed: args.seed,
        threshold: args.threshold,
    };
    let model = Model::load(&cfg.ckpt)?;
    let dataset = Dataset::open(&cfg.data)?;
    let mut samples = dataset.load_split(cfg.split)?;
    if cfg.n > samples.len() {
        eprintln!(
            "warning: --n {} exceeds the {} samples of {}; exporting all of them",
            cfg.n,
            samples.len(),
            cfg.split
        );
    }
    samples.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    samples.truncate(cfg.n);
    write_resolved(&args.out, &cfg)?;
    let boxes = export_attention(&model, &samples, &dataset.manifest.keypoint_names, &args.out, cfg.threshold)?;
    println!("exported attention for {} samples to {}", boxes.len(), args.out.display());
    Ok(())
}

/// Runs a parsed command and maps the outcome to an exit code.
pub fn run(cli: Cli) -> i32 {
    let pool = match crate::thread_pool() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAILURE;
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::GenData(a) => cmd_gen_data(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Check(a) => cmd_check(a),
        Command::ExportAttention(a) => cmd_export(a).map(|_| true),
    });
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return EXIT_OK;
            }
            if !e.to_string().contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            EXIT_USAGE
        }
    }
}
