//! Command-line surface: argument definitions and command execution.
//!
//! Every command returns a JSON summary; `main` prints it on success.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::evaluation::{build_images, evaluate, histogram_csv, score_histogram, EvalReport, IouKind, SplitSelector};
use crate::gradsuite;
use crate::inference::{predict_dataset, write_proposals, FusionMode};
use crate::model::Model;
use crate::pseudolabel::{filter_merge, generate_pseudo, PseudoConfig};
use crate::shapeworld::{generate_scenes, split_dataset, CategorySplit, Dataset, GeneratorConfig, SplitMode};
use crate::trainer::{
    load_checkpoint, run_experiment, split_name, RunLocation, RunOptions, TrainConfig, TrainError, Variant,
};

/// Default parent directory for run directories.
pub const RUNS_ENV: &str = "OPENSEG_RUNS";
pub const DEFAULT_RUNS: &str = "runs";

#[derive(Debug, Parser)]
#[command(name = "openseg", version, about = "Open-world instance segmentation on synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the train-base / eval-novel / eval-all datasets.
    Gendata(GendataArgs),
    /// Train one configuration and evaluate it.
    Train(TrainArgs),
    /// Evaluate a checkpoint on an annotation file.
    Eval(EvalArgs),
    /// Merge teacher pseudo labels into an annotation file.
    Pseudolabel(PseudolabelArgs),
    /// Finite-difference checks of every op and loss gradient.
    Gradcheck(GradcheckArgs),
    /// Tabulate metrics of several runs, averaging seeds of the same config.
    ReportCompare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct GendataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overwrite existing dataset files.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Parent of the run directory (default: $OPENSEG_RUNS or ./runs).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use this run directory instead of a derived name under `--out`.
    #[arg(long, conflicts_with = "out")]
    pub run_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Print progress to stderr every N iterations.
    #[arg(long, default_value_t = 0)]
    pub progress: usize,
    /// Log the classification loss's gradient split every step.
    #[arg(long)]
    pub instrument: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotation file, or a dataset directory (uses eval-all.jsonl).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSelector::All)]
    pub split: SplitSelector,
    /// Treat base objects as ignore regions in novel-split evaluation.
    #[arg(long)]
    pub ignore_base: bool,
    /// Output directory for metrics, histogram and proposals.
    #[arg(long)]
    pub report: PathBuf,
    /// Training config (default: the run directory's config.toml).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionMode>,
    #[arg(long)]
    pub nms: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PseudolabelArgs {
    /// Teacher checkpoint file or run directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Annotation file, or a dataset directory (uses train-base.jsonl).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
    #[arg(long, default_value_t = 0.3)]
    pub nms: f64,
    #[arg(long, value_enum, default_value_t = FusionMode::IouOnly)]
    pub fusion: FusionMode,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Run directories or metrics JSON files.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Split read from run directories.
    #[arg(long, value_enum, default_value_t = SplitSelector::Novel)]
    pub split: SplitSelector,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient check failed for: {0}")]
    GradCheck(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.into(),
        source,
    }
}

/// Dataset generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GendataConfig {
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub generator: GeneratorConfig,
    pub split: CategorySplit,
}

impl Default for GendataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 2000,
            eval_scenes: 200,
            generator: GeneratorConfig::default(),
            split: CategorySplit::default(),
        }
    }
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

pub fn execute(cli: Cli) -> Result<Value, CliError> {
    match cli.command {
        Command::Gendata(a) => gendata(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Pseudolabel(a) => pseudolabel(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::ReportCompare(a) => report_compare(&a),
    }
}

pub fn gendata(a: &GendataArgs) -> Result<Value, CliError> {
    let cfg: GendataConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => GendataConfig::default(),
    };
    generate_datasets(&cfg, a.seed, &a.out, a.force)
}

/// Writes the three annotation files and their images under `out`.
pub fn generate_datasets(cfg: &GendataConfig, seed: u64, out: &Path, force: bool) -> Result<Value, CliError> {
    cfg.generator.validate().map_err(|m| CliError::Usage(format!("generator: {m}")))?;
    cfg.split.validate().map_err(|m| CliError::Usage(format!("split: {m}")))?;
    let modes = [SplitMode::TrainBase, SplitMode::EvalNovel, SplitMode::EvalAll];
    let existing: Vec<String> = modes
        .iter()
        .map(|m| out.join(m.file_name()))
        .filter(|p| p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !existing.is_empty() && !force {
        return Err(CliError::Usage(format!(
            "refusing to overwrite {} (pass --force)",
            existing.join(", ")
        )));
    }
    let images = out.join("images");
    if force && images.is_dir() {
        fs::remove_dir_all(&images).map_err(io_err(&images))?;
    }
    let train = generate_scenes(seed, "train", cfg.train_scenes, &cfg.generator, &cfg.split);
    let eval = generate_scenes(seed, "eval", cfg.eval_scenes, &cfg.generator, &cfg.split);
    let mut files = serde_json::Map::new();
    for mode in modes {
        let scenes = if mode == SplitMode::TrainBase { &train } else { &eval };
        let d = split_dataset(scenes, &cfg.split, &cfg.generator, mode);
        let path = d.save(out, mode.file_name()).map_err(TrainError::from)?;
        let instances: usize = d.scenes.iter().map(|s| s.instances.len()).sum();
        files.insert(
            mode.file_name().into(),
            json!({"path": path, "scenes": d.scenes.len(), "instances": instances}),
        );
    }
    Ok(json!({"command": "gendata", "seed": seed, "out": out, "files": files}))
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig, CliError> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn key_metrics(r: &EvalReport) -> Value {
    let mut m = serde_json::Map::new();
    for (kind, tag) in [(IouKind::Box, "box"), (IouKind::Mask, "mask")] {
        for name in ["ap", "ar@10", "ar@50", "ar@100", "ar_s", "ar_m", "ar_l"] {
            m.insert(format!("{tag}.{name}"), json!(r.metric(kind, name)));
        }
    }
    Value::Object(m)
}

pub fn train(a: &TrainArgs) -> Result<Value, CliError> {
    let mut cfg = train_config(a.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if !a.data.is_dir() {
        return Err(CliError::Usage(format!("data directory {} does not exist", a.data.display())));
    }
    let location = match (&a.run_dir, &a.out) {
        (Some(d), _) => RunLocation::Exactly(d.clone()),
        (None, Some(o)) => RunLocation::Under(o.clone()),
        (None, None) => RunLocation::Under(
            std::env::var_os(RUNS_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_RUNS)),
        ),
    };
    let opts = RunOptions {
        progress_every: a.progress,
        instrument: a.instrument,
    };
    let out = run_experiment(&cfg, &a.data, &location, opts)?;
    Ok(json!({
        "command": "train",
        "run_dir": out.run_dir,
        "variant": cfg.variant,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "active": cfg.parts(),
        "fusion": cfg.fusion(),
        "completed_iterations": out.completed_iterations,
        "novel": key_metrics(&out.novel),
        "all": key_metrics(&out.all),
    }))
}

/// Config for a checkpoint: explicit file, else the run directory's own.
fn config_for_checkpoint(explicit: Option<&Path>, checkpoint: &Path) -> Result<TrainConfig, CliError> {
    match explicit {
        Some(p) => train_config(Some(p)),
        None if checkpoint.is_dir() && checkpoint.join("config.toml").is_file() => {
            train_config(Some(&checkpoint.join("config.toml")))
        }
        None => train_config(None),
    }
}

fn annotation_file(data: &Path, default: SplitMode) -> PathBuf {
    if data.is_dir() {
        data.join(default.file_name())
    } else {
        data.to_path_buf()
    }
}

pub fn eval(a: &EvalArgs) -> Result<Value, CliError> {
    let mut cfg = config_for_checkpoint(a.config.as_deref(), &a.checkpoint)?;
    if a.fusion.is_some() {
        cfg.inference.fusion = a.fusion;
    }
    if let Some(n) = a.nms {
        cfg.inference.nms = n;
    }
    if let Some(k) = a.top_k {
        cfg.inference.top_k = k;
    }
    cfg.validate()?;
    let ck = load_checkpoint(&a.checkpoint)?;
    let model: Model<f32> = Model::from_checkpoint(cfg.model.clone(), &ck).map_err(TrainError::from)?;
    let data = Dataset::load(&annotation_file(&a.data, SplitMode::EvalAll)).map_err(TrainError::from)?;
    let ecfg = crate::evaluation::EvalConfig {
        split: a.split,
        ignore_base: a.ignore_base,
        ..cfg.eval.clone()
    };
    ecfg.validate().map_err(CliError::Usage)?;
    fs::create_dir_all(&a.report).map_err(io_err(&a.report))?;
    let proposals = predict_dataset(&model, &data, &cfg.postprocess()).map_err(TrainError::from)?;
    write_proposals(&a.report.join("proposals.jsonl"), &proposals).map_err(TrainError::from)?;
    let images = build_images(&data, &proposals, &ecfg).map_err(TrainError::from)?;
    let report = evaluate(&images, &ecfg);
    let name = split_name(a.split);
    let write = |file: String, text: String| {
        let p = a.report.join(file);
        fs::write(&p, text).map_err(io_err(&p))
    };
    write(format!("metrics-{name}.txt"), report.to_text())?;
    write(
        format!("metrics-{name}.json"),
        serde_json::to_string_pretty(&report).expect("report serializes"),
    )?;
    let hist = score_histogram(&images, &ecfg);
    write(format!("histogram-{name}.csv"), histogram_csv(&hist))?;
    Ok(json!({
        "command": "eval",
        "split": name,
        "fusion": cfg.fusion(),
        "images": report.images,
        "gts": report.gts,
        "proposals": report.proposals,
        "metrics": key_metrics(&report),
        "report_dir": a.report,
    }))
}

pub fn pseudolabel(a: &PseudolabelArgs) -> Result<Value, CliError> {
    let cfg = config_for_checkpoint(a.config.as_deref(), &a.checkpoint)?;
    let input = annotation_file(&a.data, SplitMode::TrainBase);
    let file_name = input
        .file_name()
        .ok_or_else(|| CliError::Usage(format!("{} is not a file", input.display())))?;
    let target = a.out.join(file_name);
    if target.exists() && !a.force {
        return Err(CliError::Usage(format!(
            "refusing to overwrite {} (pass --force)",
            target.display()
        )));
    }
    if !(0.0..=1.0).contains(&a.nms) {
        return Err(CliError::Usage("--nms must lie in [0, 1]".into()));
    }
    let pcfg = PseudoConfig {
        top_k: a.topk,
        nms: a.nms,
        fusion: a.fusion,
    };
    let data = Dataset::load(&input).map_err(TrainError::from)?;
    let merged = if a.topk == 0 {
        filter_merge(&Vec::new(), &data, &pcfg)
    } else {
        let ck = load_checkpoint(&a.checkpoint)?;
        let teacher: Model<f32> = Model::from_checkpoint(cfg.model.clone(), &ck).map_err(TrainError::from)?;
        let proposals = generate_pseudo(&teacher, &data, &pcfg).map_err(TrainError::from)?;
        filter_merge(&proposals, &data, &pcfg)
    };
    let path = merged.save(&a.out, &file_name.to_string_lossy()).map_err(TrainError::from)?;
    let count = |d: &Dataset| d.scenes.iter().flat_map(|s| &s.instances).filter(|i| i.pseudo).count();
    let added = count(&merged) - count(&data);
    Ok(json!({
        "command": "pseudolabel",
        "out": path,
        "scenes": merged.scenes.len(),
        "pseudo_added": added,
        "top_k": a.topk,
        "nms": a.nms,
        "fusion": a.fusion,
    }))
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<Value, CliError> {
    let reports = gradsuite::run(a.cases, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if !failed.is_empty() {
        for r in &reports {
            eprintln!("{} f64={:.3e} f32={:.3e}", r.name, r.max_err_f64, r.max_err_f32);
        }
        return Err(CliError::GradCheck(failed.join(", ")));
    }
    Ok(json!({
        "command": "gradcheck",
        "cases": a.cases,
        "tolerance": {"f64": gradsuite::TOL_F64, "f32": gradsuite::TOL_F32},
        "ops": reports,
    }))
}

/// Run name with its trailing `-s{seed}` removed.
fn group_name(name: &str) -> String {
    match name.rsplit_once("-s") {
        Some((head, seed)) if !seed.is_empty() && seed.chars().all(|c| c.is_ascii_digit()) => head.to_string(),
        _ => name.to_string(),
    }
}

pub fn report_compare(a: &CompareArgs) -> Result<Value, CliError> {
    let mut rows: Vec<(String, Value)> = Vec::new();
    for path in &a.runs {
        let (name, file) = if path.is_dir() {
            let n = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            (n, path.join(format!("metrics-{}.json", split_name(a.split))))
        } else {
            (path.display().to_string(), path.clone())
        };
        let text = fs::read_to_string(&file).map_err(io_err(&file))?;
        let report: EvalReport =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", file.display())))?;
        rows.push((name, key_metrics(&report)));
    }
    let mut groups: Vec<(String, Vec<&Value>)> = Vec::new();
    for (name, metrics) in &rows {
        let g = group_name(name);
        match groups.iter_mut().find(|(n, _)| *n == g) {
            Some((_, v)) => v.push(metrics),
            None => groups.push((g, vec![metrics])),
        }
    }
    let averaged: Vec<Value> = groups
        .iter()
        .map(|(g, members)| {
            let mut mean = serde_json::Map::new();
            if let Some(Value::Object(first)) = members.first() {
                for key in first.keys() {
                    let vals: Vec<f64> = members.iter().filter_map(|m| m.get(key).and_then(Value::as_f64)).collect();
                    let v = (vals.len() == members.len()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
                    mean.insert(key.clone(), json!(v));
                }
            }
            json!({"group": g, "runs": members.len(), "mean": mean})
        })
        .collect();
    Ok(json!({
        "command": "report-compare",
        "split": split_name(a.split),
        "runs": rows.iter().map(|(n, m)| json!({"name": n, "metrics": m})).collect::<Vec<_>>(),
        "groups": averaged,
    }))
}
