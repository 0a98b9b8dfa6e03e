//! Command-line front end: `split`, `augment`, `train`, `eval`, `attend`.
//!
//! Exit codes: 0 success, 1 I/O or dataset failure, 2 usage error,
//! 3 numeric failure, 4 artifact mismatch.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use image::{ImageFormat, RgbImage};
use serde::Serialize;

use crate::augment::{augment_dataset, AugmentSpec};
use crate::checkpoint::{self, CheckpointMeta, RenameTable};
use crate::data::{
    decode_image, resize_bilinear, split_dataset, standardize, ClassCatalog, DatasetLoader,
    LoadedDataset, Sample, SplitItem, SplitManifest, SplitMode, SplitName,
};
use crate::error::{Error, Result};
use crate::eval::{confusion, predict, report};
use crate::parallel;
use crate::rng::derive_seed;
use crate::rollout::{grid_csv, overlay, rollout};
use crate::train::{history_csv, train, HeldOut, LabeledImages, TrainConfig};
use crate::vit::{forward_image, ModelParams, ViTConfig};

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_MISMATCH: i32 = 4;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "cookstate",
    version,
    about = "Vision Transformer cooking-state recognition"
)]
pub struct Cli {
    /// Base seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Threads for image decoding and augmentation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub workers: usize,

    /// File of `key=value` lines applied as flags before the command line.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Log progress at debug level.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Write a train/val/test manifest for a `root/<class>/<image>` tree.
    #[command(args_override_self = true)]
    Split(SplitArgs),
    /// Write a five-fold augmented copy of the training split.
    #[command(args_override_self = true)]
    Augment(AugmentArgs),
    /// Fine-tune or train a model.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Render attention-rollout heatmaps.
    #[command(args_override_self = true)]
    Attend(AttendArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub root: PathBuf,
    /// Exact `train,val,test` sizes.
    #[arg(long, value_name = "TRAIN,VAL,TEST", conflicts_with_all = ["fractions", "val_from_train"])]
    pub counts: Option<String>,
    /// `train,test` fractions of the whole dataset.
    #[arg(long, value_name = "TRAIN,TEST", default_value = "0.85,0.15")]
    pub fractions: String,
    /// Fraction of the training part moved to validation.
    #[arg(long, default_value_t = 0.15)]
    pub val_from_train: f64,
    /// Split each class separately.
    #[arg(long)]
    pub stratified: bool,
    #[arg(long, default_value = "split.txt")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AugmentArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output dataset directory; receives images and `split.txt`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Architecture: b16, l16 or tiny.
    #[arg(long, default_value = "b16")]
    pub preset: String,
    /// Override the preset's input resolution.
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Initialise from a VITC weight file.
    #[arg(long, value_name = "PATH", conflicts_with = "from_scratch")]
    pub pretrained: Option<PathBuf>,
    /// Random initialisation (the default when no weights are given).
    #[arg(long)]
    pub from_scratch: bool,
    /// Tensor rename table for `--pretrained`.
    #[arg(long, value_name = "PATH", requires = "pretrained")]
    pub rename_table: Option<PathBuf>,
    /// Expand the training split five-fold in memory.
    #[arg(long, overrides_with = "no_augment")]
    pub augment: bool,
    #[arg(long, overrides_with = "augment")]
    pub no_augment: bool,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.03)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 100)]
    pub eval_interval: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 0)]
    pub warmup: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Update only the classification head.
    #[arg(long)]
    pub freeze_encoder: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct AttendArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Contract(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::Divergence { .. } => EXIT_NUMERIC,
        Error::Format(_) | Error::Integrity(_) | Error::Inventory(_) | Error::Shape { .. } => {
            EXIT_MISMATCH
        }
        Error::Data(_) | Error::Image { .. } | Error::Io(_) => EXIT_FAILURE,
    }
}

const COMMANDS: [&str; 5] = ["split", "augment", "train", "eval", "attend"];

/// Reads `--config <path>` from `argv` and splices its entries in as flags
/// directly after the subcommand, so explicit flags still win.
pub fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        let s = a.to_string_lossy();
        if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else if s == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
    let flags = config_flags(&text)?;
    let at = argv
        .iter()
        .position(|a| COMMANDS.contains(&a.to_string_lossy().as_ref()))
        .map(|i| i + 1)
        .unwrap_or(argv.len());
    let mut out = argv[..at].to_vec();
    out.extend(flags.into_iter().map(OsString::from));
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}

/// `key=value` lines to flags; `key=true` becomes a bare switch and
/// `key=false` is dropped.
pub fn config_flags(text: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "config line {}: expected key=value, got {line:?}",
                n + 1
            ))
        })?;
        let key = format!("--{}", k.trim().replace('_', "-"));
        match v.trim() {
            "true" => out.push(key),
            "false" => {}
            v => {
                out.push(key);
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct RunEcho<'a, T: Serialize> {
    version: &'static str,
    command: &'static str,
    seed: u64,
    workers: usize,
    config_file: Option<&'a Path>,
    args: &'a T,
    #[serde(skip_serializing_if = "Option::is_none")]
    effective: Option<serde_json::Value>,
}

fn write_echo<T: Serialize>(
    cli: &Cli,
    command: &'static str,
    args: &T,
    effective: Option<serde_json::Value>,
    path: &Path,
) -> Result<()> {
    let echo = RunEcho {
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cli.seed,
        workers: cli.workers,
        config_file: cli.config.as_deref(),
        args,
        effective,
    };
    let json = serde_json::to_string_pretty(&echo).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, json + "\n")?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Split(a) => run_split(cli, a),
        Command::Augment(a) => run_augment(cli, a),
        Command::Train(a) => run_train(cli, a),
        Command::Eval(a) => run_eval(cli, a),
        Command::Attend(a) => run_attend(cli, a),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str, n: usize, flag: &str) -> Result<Vec<T>> {
    let parts = s
        .split(',')
        .map(|p| p.trim().parse::<T>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Config(format!("--{flag}: cannot parse {s:?}")))?;
    if parts.len() != n {
        return Err(Error::Config(format!(
            "--{flag} needs {n} comma-separated values, got {s:?}"
        )));
    }
    Ok(parts)
}

fn ensure_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::Config(format!(
            "{what} {} is not a directory",
            path.display()
        )));
    }
    Ok(())
}

fn ensure_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn split_mode(a: &SplitArgs) -> Result<SplitMode> {
    if let Some(c) = &a.counts {
        let v: Vec<usize> = parse_list(c, 3, "counts")?;
        return Ok(SplitMode::Counts {
            train: v[0],
            val: v[1],
            test: v[2],
        });
    }
    let f: Vec<f64> = parse_list(&a.fractions, 2, "fractions")?;
    if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f[0] + f[1] - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "--fractions {} must be two values in [0, 1] summing to 1",
            a.fractions
        )));
    }
    if !(0.0..1.0).contains(&a.val_from_train) {
        return Err(Error::Config(format!(
            "--val-from-train {} must be in [0, 1)",
            a.val_from_train
        )));
    }
    Ok(SplitMode::Fractions {
        test: f[1],
        val_from_train: a.val_from_train,
    })
}

fn class_counts(paths: &[String], catalog: &ClassCatalog) -> Vec<usize> {
    let mut counts = vec![0; catalog.len()];
    for p in paths {
        if let Some(k) = p.split('/').next().and_then(|c| catalog.index_of(c)) {
            counts[k] += 1;
        }
    }
    counts
}

fn print_split_summary(m: &SplitManifest, catalog: &ClassCatalog) {
    let width = catalog
        .names
        .iter()
        .map(String::len)
        .max()
        .unwrap_or(5)
        .max(5);
    println!(
        "{:<width$}  {:>7}  {:>7}  {:>7}",
        "class", "train", "val", "test"
    );
    let per: Vec<Vec<usize>> = SplitName::ALL
        .iter()
        .map(|s| class_counts(m.get(*s), catalog))
        .collect();
    for (k, name) in catalog.names.iter().enumerate() {
        println!(
            "{name:<width$}  {:>7}  {:>7}  {:>7}",
            per[0][k], per[1][k], per[2][k]
        );
    }
    println!(
        "{:<width$}  {:>7}  {:>7}  {:>7}",
        "total",
        m.train.len(),
        m.val.len(),
        m.test.len()
    );
}

fn run_split(cli: &Cli, a: &SplitArgs) -> Result<()> {
    ensure_dir(&a.root, "--root")?;
    let mode = split_mode(a)?;
    let (items, catalog) = DatasetLoader::new(&a.root).list()?;
    let items: Vec<SplitItem> = items
        .into_iter()
        .map(|(path, label)| SplitItem { path, label })
        .collect();
    let manifest = split_dataset(&items, mode, cli.seed, a.stratified)?;
    manifest.save(&a.out)?;
    print_split_summary(&manifest, &catalog);
    let mut echo = a.out.as_os_str().to_owned();
    echo.push(".run.json");
    write_echo(cli, "split", a, None, Path::new(&echo))?;
    log::info!("wrote {}", a.out.display());
    Ok(())
}

fn load_split(
    root: &Path,
    manifest: &SplitManifest,
    split: SplitName,
    resize: Option<usize>,
    workers: usize,
) -> Result<LoadedDataset> {
    let mut loader = DatasetLoader::new(root).workers(workers);
    if let Some(size) = resize {
        loader = loader.resize_to(size);
    }
    let (_, catalog) = loader.list()?;
    let items = manifest.items(split, &catalog)?;
    loader.load_items(&items, catalog)
}

fn write_png(pixels: &crate::tensor::Tensor<f32>, path: &Path) -> Result<()> {
    let s = pixels.shape();
    let raw: Vec<u8> = pixels
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img = RgbImage::from_raw(s[1] as u32, s[0] as u32, raw)
        .ok_or_else(|| Error::Contract(format!("cannot encode pixels of shape {s:?}")))?;
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

fn augment_spec(cli: &Cli) -> AugmentSpec {
    AugmentSpec {
        seed: derive_seed(cli.seed, &[0xA06]),
        ..AugmentSpec::default()
    }
}

fn run_augment(cli: &Cli, a: &AugmentArgs) -> Result<()> {
    ensure_dir(&a.root, "--root")?;
    ensure_file(&a.manifest, "--manifest")?;
    let manifest = SplitManifest::load(&a.manifest)?;
    let train_set = load_split(&a.root, &manifest, SplitName::Train, None, cli.workers)?;
    let spec = augment_spec(cli);
    let expanded =
        parallel::with_workers(cli.workers, || augment_dataset(&train_set.samples, &spec))?;

    let mut out = SplitManifest {
        train: Vec::with_capacity(expanded.len()),
        ..manifest.clone()
    };
    for name in &train_set.catalog.names {
        fs::create_dir_all(a.out.join(name))?;
    }
    for s in &expanded {
        let rel = augmented_name(&s.source_path);
        write_png(&s.pixels, &a.out.join(&rel))?;
        out.train.push(rel);
    }
    for p in manifest.val.iter().chain(&manifest.test) {
        fs::copy(a.root.join(p), a.out.join(p))?;
    }
    let n = out.len() as f64;
    out.fractions = [
        out.train.len() as f64 / n,
        out.val.len() as f64 / n,
        out.test.len() as f64 / n,
    ];
    out.save(&a.out.join("split.txt"))?;
    write_echo(
        cli,
        "augment",
        a,
        Some(serde_json::json!({ "augment": spec })),
        &a.out.join("run.json"),
    )?;
    println!(
        "augmented {} training images into {} ({} files)",
        train_set.samples.len(),
        a.out.display(),
        expanded.len()
    );
    Ok(())
}

/// `class/img.jpg` → `class/img.png`, `class/img.jpg#aug2` → `class/img.aug2.png`.
fn augmented_name(source: &str) -> String {
    let (path, tag) = match source.split_once('#') {
        Some((p, t)) => (p, Some(t)),
        None => (source, None),
    };
    let stem = Path::new(path).with_extension("");
    let stem = stem.to_string_lossy().replace('\\', "/");
    match tag {
        Some(t) => format!("{stem}.{t}.png"),
        None => format!("{stem}.png"),
    }
}

fn train_config(cli: &Cli, a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        total_steps: a.steps,
        batch_size: a.batch,
        base_lr: a.lr,
        momentum: a.momentum,
        eval_interval_steps: a.eval_interval,
        early_stop_patience_evals: a.patience,
        warmup_steps: a.warmup,
        dropout: a.dropout,
        freeze_encoder: a.freeze_encoder,
        seed: derive_seed(cli.seed, &[0x7EA1]),
    }
}

fn run_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    ensure_dir(&a.root, "--root")?;
    ensure_file(&a.manifest, "--manifest")?;
    if let Some(p) = &a.pretrained {
        ensure_file(p, "--pretrained")?;
    }
    let cfg = train_config(cli, a);
    cfg.validate()?;
    let manifest = SplitManifest::load(&a.manifest)?;
    let (_, catalog) = DatasetLoader::new(&a.root).list()?;
    let mut model_cfg = ViTConfig::preset(&a.preset, catalog.len())?;
    if let Some(size) = a.image_size {
        model_cfg.image_size = size;
    }
    model_cfg.validate()?;

    let size = Some(model_cfg.image_size);
    let train_set = load_split(&a.root, &manifest, SplitName::Train, size, cli.workers)?;
    let val_set = load_split(&a.root, &manifest, SplitName::Val, size, cli.workers)?;
    if val_set.samples.is_empty() {
        return Err(Error::Data("the validation split is empty".into()));
    }
    let augment = a.augment && !a.no_augment;
    let spec = augment_spec(cli);
    let train_samples: Vec<Sample> = if augment {
        parallel::with_workers(cli.workers, || augment_dataset(&train_set.samples, &spec))?
    } else {
        train_set.samples
    };
    log::info!(
        "{} training and {} validation images",
        train_samples.len(),
        val_set.samples.len()
    );

    let params = match &a.pretrained {
        Some(path) => {
            let renames = match &a.rename_table {
                Some(p) => RenameTable::load(p)?,
                None => RenameTable::identity(),
            };
            checkpoint::import_external(path, &model_cfg, &renames)?.adapt_head(catalog.len())?
        }
        None => ModelParams::init(&model_cfg, derive_seed(cli.seed, &[0x1417]))?,
    };

    fs::create_dir_all(&a.out)?;
    let effective = serde_json::json!({
        "model": model_cfg,
        "train": cfg,
        "augment": augment.then_some(&spec),
        "classes": catalog.names,
    });
    write_echo(cli, "train", a, Some(effective), &a.out.join("run.json"))?;

    let train_data = LabeledImages::from_samples(&train_samples);
    let val_data = LabeledImages::from_samples(&val_set.samples);
    let mut validation = HeldOut {
        data: &val_data,
        batch_size: cfg.batch_size,
    };
    let outcome = train(params, &train_data, &mut validation, &cfg)?;

    let meta = CheckpointMeta {
        seed: cli.seed,
        source: match &a.pretrained {
            Some(p) => format!("fine-tuned from {}", p.display()),
            None => "trained from scratch".into(),
        },
        step: outcome.best_step.map(|s| s + 1).unwrap_or(0),
    };
    checkpoint::save(&outcome.best_params, &meta, &a.out.join("model.vitc"))?;
    fs::write(a.out.join("history.csv"), history_csv(&outcome.history))?;
    println!(
        "steps={} best_val_accuracy={:?} best_step={} early_stop={}",
        outcome.steps_run, outcome.best_val_accuracy, meta.step, outcome.stopped_early
    );
    Ok(())
}

fn run_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    ensure_dir(&a.root, "--root")?;
    ensure_file(&a.manifest, "--manifest")?;
    ensure_file(&a.checkpoint, "--checkpoint")?;
    let split: SplitName = a
        .split
        .parse()
        .map_err(|_| Error::Config(format!("--split {:?} is not train, val or test", a.split)))?;
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let config = ckpt.config().clone();
    let manifest = SplitManifest::load(&a.manifest)?;
    let data = load_split(
        &a.root,
        &manifest,
        split,
        Some(config.image_size),
        cli.workers,
    )?;
    if data.catalog.len() != config.num_classes {
        return Err(Error::Inventory(format!(
            "checkpoint predicts {} classes but the dataset has {}",
            config.num_classes,
            data.catalog.len()
        )));
    }
    if data.samples.is_empty() {
        return Err(Error::Data(format!("the {split} split is empty")));
    }
    let images: Vec<_> = data
        .samples
        .iter()
        .map(|s| standardize(&s.pixels))
        .collect();
    let refs: Vec<_> = images.iter().collect();
    let pred = predict(&ckpt.params, &refs, a.batch)?;
    let truth: Vec<usize> = data.samples.iter().map(|s| s.label).collect();
    let cm = confusion(&truth, &pred.labels, config.num_classes)?;
    let rep = report(&cm);
    let names = &data.catalog.names;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("report.txt"), rep.to_table(names))?;
    fs::write(a.out.join("report.kv"), rep.to_kv(names))?;
    fs::write(a.out.join("confusion.csv"), cm.to_csv(names))?;
    fs::write(
        a.out.join("confusion_normalized.csv"),
        cm.to_normalized_csv(names),
    )?;
    let effective = serde_json::json!({ "model": config, "samples": data.samples.len() });
    write_echo(cli, "eval", a, Some(effective), &a.out.join("run.json"))?;
    print!("{}", rep.to_table(names));
    println!("accuracy={:?}", rep.accuracy);
    Ok(())
}

fn run_attend(cli: &Cli, a: &AttendArgs) -> Result<()> {
    ensure_file(&a.checkpoint, "--checkpoint")?;
    let ckpt = checkpoint::load(&a.checkpoint)?;
    let config = ckpt.config();
    fs::create_dir_all(&a.out)?;
    let mut failures = BTreeMap::new();
    let mut used_names = BTreeMap::<String, usize>::new();
    for path in &a.images {
        let result = (|| -> Result<()> {
            let original = decode_image(path)?;
            let input = standardize(&resize_bilinear(&original, config.image_size)?);
            let (_, trace) = forward_image(&ckpt.params, &input, true)?;
            let map = rollout(&trace.expect("capture requested"))?;
            let name = output_stem(path, &mut used_names);
            overlay(
                &map.grid,
                map.grid_size,
                &original,
                &a.out.join(format!("{name}.rollout.png")),
            )?;
            fs::write(a.out.join(format!("{name}.rollout.csv")), grid_csv(&map))?;
            Ok(())
        })();
        if let Err(e) = result {
            log::warn!("skipping {}: {e}", path.display());
            failures.insert(path.display().to_string(), e.to_string());
        }
    }
    write_echo(cli, "attend", a, None, &a.out.join("run.json"))?;
    if failures.len() == a.images.len() {
        return Err(Error::Data("no input image could be processed".into()));
    }
    println!(
        "rendered {} of {} images into {}",
        a.images.len() - failures.len(),
        a.images.len(),
        a.out.display()
    );
    Ok(())
}

/// File stem, suffixed when two inputs share one.
fn output_stem(path: &Path, used: &mut BTreeMap<String, usize>) -> String {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let n = used.entry(stem.clone()).or_insert(0);
    *n += 1;
    if *n == 1 {
        stem
    } else {
        format!("{stem}-{n}")
    }
}
