//! Command-line workflow: simulate, inject, build datasets, train with
//! cross-validation, evaluate, plot, diagnose, and a one-shot `demo`.
//!
//! Every command writes into `--out` and merges what it wrote into
//! `manifest.txt` there, with a SHA-256 hash per artifact.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::acquisition::{ChangeLog, LogError};
use crate::dataset::{kfold, label_windows, vectorize, Dataset, DatasetError, TimeScaling, DEFAULT_FOLDS, DEFAULT_WINDOW};
use crate::diagnoser::{format_verdicts, latency, replay, transitions, Diagnoser, DiagnoserError, VerdictKind, DEFAULT_TAU};
use crate::faults::{
    format_scenario, parse_scenarios, scenario_suite, ClassLabel, FaultError, FaultSpec, InjectionWindow, LabelCatalog,
    NUM_CLASSES,
};
use crate::metrics::{fold_average, fmt_opt, report, write_matrix, MetricsError};
use crate::nn::{evaluate, train, CurvePoint, Model, ModelConfig, NnError, Optimizer, TrainConfig, TrainingCurves};
use crate::plant::{parse_plant, run_scenario, PlantDescription, PlantError};
use crate::plot::{heatmap, line_chart, Series};
use crate::{derive_seed, Millis};

pub const MANIFEST: &str = "manifest.txt";
pub const DEFAULT_HORIZON_MS: Millis = 50_000;
pub const DEFAULT_INJECT_FROM: f64 = 0.72;
pub const DEFAULT_INJECT_TO: f64 = 0.86;

const SALT_RUNS: u64 = 1;
const SALT_HELD_OUT: u64 = 2;
const SALT_SIMULATE: u64 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Diagnose(#[from] DiagnoserError),
    #[error("{0}")]
    Plot(String),
    #[error("{0}")]
    Manifest(String),
    #[error("{path}: {message}")]
    Input { path: PathBuf, message: String },
}

impl CliError {
    /// Stable machine-readable error class.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Plant(_) => "plant",
            CliError::Fault(_) => "fault",
            CliError::Log(_) => "log",
            CliError::Dataset(_) => "dataset",
            CliError::Model(_) => "model",
            CliError::Metrics(_) => "metrics",
            CliError::Diagnose(_) => "diagnose",
            CliError::Plot(_) => "plot",
            CliError::Manifest(_) => "manifest",
            CliError::Input { .. } => "input",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// `error: <code>: <message>` on a single line.
    pub fn render(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error: {}: {}", self.code(), msg.trim())
    }
}

fn input_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Input { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Parser)]
#[command(name = "deslab", version, about = "Data-driven fault diagnosis for boolean discrete event plants")]
pub struct Cli {
    /// Master seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Suppress progress output (errors and `diagnose` output still print).
    #[arg(long, short, global = true)]
    pub quiet: bool,
    /// Plant description file (default: bundled import station).
    #[arg(long, global = true)]
    pub plant: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the plant in normal mode and log every I/O change.
    Simulate {
        #[arg(long, default_value_t = 60_000)]
        horizon_ms: Millis,
    },
    /// Run fault scenarios and write one labeled log per scenario.
    Inject(InjectArgs),
    /// Build the windowed dataset from labeled logs (files or directories).
    Dataset {
        #[arg(required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_WINDOW)]
        window: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Train one model per fold with stratified k-fold cross-validation.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        training: TrainArgs,
    },
    /// Evaluate fold checkpoints on their validation folds.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// One checkpoint per fold, in fold order.
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
    },
    /// Render curves or a confusion matrix as SVG.
    Plot {
        /// curves.csv or confusion.csv
        #[arg(long)]
        input: PathBuf,
        /// loss | ac | pr:<class> | a curves column | confusion
        #[arg(long)]
        series: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Replay a log through a trained model and print one verdict per event.
    Diagnose {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TAU)]
        tau: f64,
        /// Majority vote over the last k verdicts (off by default).
        #[arg(long)]
        smoothing: Option<usize>,
    },
    /// Whole experiment end to end: inject, dataset, train, eval, plots and
    /// held-out online diagnosis.
    Demo(DemoArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InjectArgs {
    /// Scenario file: one `none` or `<signal> <kind> at <ms> [for <ms>]` per line.
    #[arg(long, conflicts_with = "per_class")]
    pub scenarios: Option<PathBuf>,
    /// Generate a suite with this many runs per class instead.
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_HORIZON_MS)]
    pub horizon_ms: Millis,
    /// Earliest generated injection time, as a fraction of the horizon.
    #[arg(long, default_value_t = DEFAULT_INJECT_FROM)]
    pub inject_from: f64,
    #[arg(long, default_value_t = DEFAULT_INJECT_TO)]
    pub inject_to: f64,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 1)]
    pub layers: usize,
    /// none | divide:<c> | log1p
    #[arg(long, default_value = "divide:1000")]
    pub time_scaling: String,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    /// adam | sgd
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 5.0)]
    pub clip: f64,
    #[arg(long)]
    pub no_clip: bool,
    /// Weight the loss by inverse class frequency.
    #[arg(long)]
    pub class_weighting: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 20)]
    pub per_class: usize,
    #[arg(long, default_value_t = DEFAULT_HORIZON_MS)]
    pub horizon_ms: Millis,
    #[arg(long, default_value_t = DEFAULT_INJECT_FROM)]
    pub inject_from: f64,
    #[arg(long, default_value_t = DEFAULT_INJECT_TO)]
    pub inject_to: f64,
    #[arg(long, default_value_t = DEFAULT_WINDOW)]
    pub window: usize,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    pub folds: usize,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainArgs,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let ctx = Context::new(cli)?;
    match &cli.command {
        Command::Simulate { horizon_ms } => cmd_simulate(&ctx, *horizon_ms),
        Command::Inject(a) => cmd_inject(&ctx, a).map(|_| ()),
        Command::Dataset { logs, window, stride } => cmd_dataset(&ctx, logs, *window, *stride).map(|_| ()),
        Command::Train { dataset, folds, model, training } => {
            let ds = read_dataset(dataset)?;
            cmd_train(&ctx, &ds, *folds, model, training).map(|_| ())
        }
        Command::Eval { dataset, models } => {
            let ds = read_dataset(dataset)?;
            let models = models.iter().map(|p| read_model(p)).collect::<Result<Vec<_>, _>>()?;
            cmd_eval(&ctx, &ds, &models).map(|_| ())
        }
        Command::Plot { input, series, output } => cmd_plot(&ctx, input, series, output.as_deref()),
        Command::Diagnose { model, log, tau, smoothing } => cmd_diagnose(model, log, *tau, *smoothing),
        Command::Demo(a) => cmd_demo(&ctx, a),
    }
}

/// Shared state of one invocation.
pub struct Context {
    pub seed: u64,
    pub out: PathBuf,
    pub plant: PlantDescription,
    pub plant_source: String,
    pub catalog: LabelCatalog,
    pub quiet: bool,
}

impl Context {
    pub fn new(cli: &Cli) -> Result<Self, CliError> {
        let (plant, plant_source) = match &cli.plant {
            Some(p) => (parse_plant(&read_text(p)?)?, p.display().to_string()),
            None => (PlantDescription::import_station(), "bundled:import_station".to_string()),
        };
        let catalog = LabelCatalog::import_station();
        catalog.validate_against(&plant)?;
        Ok(Context { seed: cli.seed, out: cli.out.clone(), plant, plant_source, catalog, quiet: cli.quiet })
    }

    fn say(&self, args: std::fmt::Arguments) {
        if !self.quiet {
            print!("{args}");
        }
    }

    fn sayln(&self, args: std::fmt::Arguments) {
        if !self.quiet {
            println!("{args}");
        }
    }

    fn note(&self, args: std::fmt::Arguments) {
        if !self.quiet {
            eprintln!("{args}");
        }
    }

    fn write(&self, rel: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| CliError::Io { path: dir.to_path_buf(), source: e })?;
        }
        fs::write(&path, contents).map_err(|e| CliError::Io { path: path.clone(), source: e })?;
        Ok(path)
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io { path: path.to_path_buf(), source: e })
}

pub fn read_log(path: &Path) -> Result<ChangeLog, CliError> {
    ChangeLog::from_csv(&read_text(path)?).map_err(|e| input_err(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    Dataset::from_text(&read_text(path)?).map_err(|e| input_err(path, e))
}

pub fn read_model(path: &Path) -> Result<Model, CliError> {
    Model::from_checkpoint(&read_text(path)?).map_err(|e| input_err(path, e))
}

// ---------------------------------------------------------------------------
// Manifest

/// Run provenance plus the hash of every artifact, keyed by path relative
/// to the output directory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub fields: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.fields {
            writeln!(out, "{k}={v}").unwrap();
        }
        for (path, hash) in &self.artifacts {
            writeln!(out, "artifact {hash} {path}").unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, CliError> {
        let mut m = RunManifest::default();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            if let Some(rest) = line.strip_prefix("artifact ") {
                let (hash, path) = rest
                    .split_once(' ')
                    .ok_or_else(|| CliError::Manifest(format!("line {}: malformed artifact entry", i + 1)))?;
                m.artifacts.insert(path.to_string(), hash.to_string());
            } else if let Some((k, v)) = line.split_once('=') {
                m.fields.insert(k.to_string(), v.to_string());
            } else {
                return Err(CliError::Manifest(format!("line {}: expected `key=value` or `artifact`", i + 1)));
            }
        }
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Ok(RunManifest::default());
        }
        RunManifest::from_text(&read_text(&path)?)
    }

    /// Every artifact exists and matches its recorded hash.
    pub fn verify(&self, dir: &Path) -> Result<(), CliError> {
        for (rel, hash) in &self.artifacts {
            let path = dir.join(rel);
            let bytes = fs::read(&path).map_err(|e| CliError::Io { path: path.clone(), source: e })?;
            if &sha256_hex(&bytes) != hash {
                return Err(CliError::Manifest(format!("{rel}: hash mismatch")));
            }
        }
        Ok(())
    }
}

/// Merges `fields` and the hashes of `written` into the manifest of
/// `ctx.out`.
fn record_manifest(ctx: &Context, fields: &[(&str, String)], written: &[PathBuf]) -> Result<(), CliError> {
    let mut m = RunManifest::load(&ctx.out)?;
    m.fields.insert("plant".into(), ctx.plant_source.clone());
    m.fields.insert("seed".into(), ctx.seed.to_string());
    m.fields.insert("out".into(), ctx.out.display().to_string());
    for (k, v) in fields {
        m.fields.insert(k.to_string(), v.clone());
    }
    for path in written {
        let bytes = fs::read(path).map_err(|e| CliError::Io { path: path.clone(), source: e })?;
        let rel = path.strip_prefix(&ctx.out).unwrap_or(path).to_string_lossy().replace('\\', "/");
        m.artifacts.insert(rel, sha256_hex(&bytes));
    }
    ctx.write(MANIFEST, &m.to_text())?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_simulate(ctx: &Context, horizon_ms: Millis) -> Result<(), CliError> {
    let mut log = run_scenario(&ctx.plant, horizon_ms, &[], derive_seed(ctx.seed, SALT_SIMULATE, 0))?;
    log.label = Some(ClassLabel::NORMAL);
    let path = ctx.write("normal.csv", &log.to_csv())?;
    ctx.sayln(format_args!("{}: {} records over {} signals", path.display(), log.records.len(), log.width()));
    record_manifest(ctx, &[("horizon_ms", horizon_ms.to_string())], &[path])
}

/// Runs every scenario; returns the written log paths in scenario order.
pub fn cmd_inject(ctx: &Context, a: &InjectArgs) -> Result<Vec<PathBuf>, CliError> {
    let scan = ctx.plant.scan_period_ms;
    let (faults, source): (Vec<Option<FaultSpec>>, String) = match (&a.scenarios, a.per_class) {
        (Some(p), _) => (parse_scenarios(&read_text(p)?, scan).map_err(|e| input_err(p, e))?, p.display().to_string()),
        (None, Some(k)) => {
            if !(0.0..=1.0).contains(&a.inject_from) || a.inject_to < a.inject_from || a.inject_to > 1.0 {
                return Err(CliError::Usage("injection fractions must satisfy 0 <= from <= to <= 1".into()));
            }
            let window = InjectionWindow::fraction(a.horizon_ms, a.inject_from, a.inject_to, scan);
            let suite = scenario_suite(&ctx.catalog, &ctx.plant, k, window, ctx.seed)?;
            let text: String = suite.iter().map(|s| format_scenario(s.fault.as_ref()) + "\n").collect();
            ctx.write("scenarios.txt", &text)?;
            (suite.into_iter().map(|s| s.fault).collect(), "generated:scenarios.txt".to_string())
        }
        (None, None) => return Err(CliError::Usage("inject needs --scenarios <file> or --per-class <n>".into())),
    };
    let mut written = Vec::with_capacity(faults.len());
    if a.scenarios.is_none() {
        written.push(ctx.out.join("scenarios.txt"));
    }
    let mut logs = Vec::with_capacity(faults.len());
    for (r, fault) in faults.iter().enumerate() {
        let faults: Vec<FaultSpec> = fault.iter().cloned().collect();
        let label = crate::faults::label_for(&faults, &ctx.catalog)?;
        let mut log = run_scenario(&ctx.plant, a.horizon_ms, &faults, derive_seed(ctx.seed, SALT_RUNS, r as u64))?;
        log.label = Some(label);
        log.inject_ms = fault.as_ref().map(|f| f.inject_time_ms);
        let path = ctx.write(&format!("logs/run_{r:04}.csv"), &log.to_csv())?;
        logs.push(path.clone());
        written.push(path);
    }
    ctx.sayln(format_args!("{} labeled logs in {}", logs.len(), ctx.out.join("logs").display()));
    record_manifest(ctx, &[("scenarios", source), ("horizon_ms", a.horizon_ms.to_string())], &written)?;
    Ok(logs)
}

/// Expands directories to their `*.csv` files, sorted by name.
fn collect_logs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::Io { path: p.clone(), source: e })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

/// Windows every labeled log; run ids follow the input order.
pub fn build_dataset(logs: &[(PathBuf, ChangeLog)], window: usize, stride: usize) -> Result<Dataset, CliError> {
    let (_, first) = logs.first().ok_or_else(|| CliError::Usage("no logs given".into()))?;
    let mut ds = Dataset::new(window, first.width());
    for (run, (path, log)) in logs.iter().enumerate() {
        if log.signals != first.signals {
            return Err(input_err(path, "signal list differs from the first log"));
        }
        let label = log.label.ok_or_else(|| input_err(path, "log carries no `# label:` header"))?;
        let vectors = vectorize(log).map_err(|e| input_err(path, e))?;
        let samples = label_windows(&vectors, window, stride, label, log.inject_ms).map_err(|e| input_err(path, e))?;
        ds.push_run(run, samples)?;
    }
    Ok(ds)
}

pub fn histogram_text(ds: &Dataset) -> String {
    let mut out = format!("windows: {} (N={}, width={})\n", ds.len(), ds.window, ds.width);
    for (c, n) in ds.histogram().iter().enumerate() {
        writeln!(out, "C{c}: {n}").unwrap();
    }
    out
}

pub fn cmd_dataset(ctx: &Context, inputs: &[PathBuf], window: usize, stride: usize) -> Result<Dataset, CliError> {
    let files = collect_logs(inputs)?;
    if files.is_empty() {
        return Err(CliError::Usage("no log files found".into()));
    }
    let logs = files.into_iter().map(|p| read_log(&p).map(|l| (p, l))).collect::<Result<Vec<_>, _>>()?;
    let ds = build_dataset(&logs, window, stride)?;
    let path = ctx.write("dataset.txt", &ds.to_text())?;
    ctx.say(format_args!("{}", histogram_text(&ds)));
    record_manifest(ctx, &[("window", window.to_string()), ("stride", stride.to_string())], &[path])?;
    Ok(ds)
}

fn model_config(ds: &Dataset, a: &ModelArgs) -> Result<ModelConfig, CliError> {
    let time_scaling: TimeScaling = a.time_scaling.parse().map_err(|_| CliError::Usage(format!("bad --time-scaling `{}`", a.time_scaling)))?;
    let cfg = ModelConfig { hidden: a.hidden, layers: a.layers, time_scaling, ..ModelConfig::for_width(ds.width, ds.window) };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(seed: u64, a: &TrainArgs) -> Result<TrainConfig, CliError> {
    let optimizer = match a.optimizer.as_str() {
        "adam" => Optimizer::default(),
        "sgd" => Optimizer::Sgd,
        other => return Err(CliError::Usage(format!("unknown optimizer `{other}` (adam | sgd)"))),
    };
    let cfg = TrainConfig {
        learning_rate: a.learning_rate,
        epochs: a.epochs,
        batch_size: a.batch_size,
        optimizer,
        seed,
        gradient_clip: (!a.no_clip).then_some(a.clip),
        class_weighting: a.class_weighting,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Fold parallelism: `DESLAB_THREADS` if set, else all available cores.
pub fn thread_count() -> usize {
    std::env::var("DESLAB_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

pub fn checkpoint_name(fold: usize) -> String {
    format!("fold_{fold}.ckpt")
}

pub fn cmd_train(ctx: &Context, ds: &Dataset, folds: usize, m: &ModelArgs, t: &TrainArgs) -> Result<Vec<Model>, CliError> {
    let model_cfg = model_config(ds, m)?;
    let train_cfg = train_config(ctx.seed, t)?;
    let split = kfold(&ds.labels(), folds, ctx.seed)?;
    let outcome = train(ds, &split, &model_cfg, &train_cfg, thread_count())?;
    let mut written = Vec::new();
    for (k, model) in outcome.models.iter().enumerate() {
        written.push(ctx.write(&checkpoint_name(k), &model.to_checkpoint())?);
    }
    written.push(ctx.write("curves.csv", &outcome.curves.to_csv())?);
    let summary = training_summary(&outcome.curves);
    written.push(ctx.write("train_summary.txt", &summary)?);
    ctx.say(format_args!("{summary}"));
    record_manifest(ctx, &[("folds", folds.to_string())], &written)?;
    Ok(outcome.models)
}

fn training_summary(curves: &TrainingCurves) -> String {
    let mut out = String::from("fold  epochs  first_train_cce  final_train_cce  final_val_cce  final_val_ac\n");
    let mut acs = Vec::new();
    for fold in curves.folds() {
        let pts: Vec<&CurvePoint> = curves.fold(fold).collect();
        let (first, last) = (pts[0], pts[pts.len() - 1]);
        acs.push(last.val_ac);
        writeln!(
            out,
            "{fold:>4}  {:>6}  {:>15.6}  {:>15.6}  {:>13.6}  {:>12.6}",
            pts.len(),
            first.train_cce,
            last.train_cce,
            last.val_cce,
            last.val_ac
        )
        .unwrap();
    }
    if !acs.is_empty() {
        writeln!(out, "mean final validation AC: {:.6}", acs.iter().sum::<f64>() / acs.len() as f64).unwrap();
    }
    out
}

/// Per-fold evaluation results.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub fold_ac: Vec<f64>,
    pub averaged: Vec<Vec<f64>>,
    pub report: String,
}

pub fn confusion_csv(m: &[Vec<f64>]) -> String {
    let mut out = String::from("truth");
    for j in 0..m.len() {
        write!(out, ",{j}").unwrap();
    }
    out.push('\n');
    for (i, row) in m.iter().enumerate() {
        write!(out, "{i}").unwrap();
        for v in row {
            write!(out, ",{v:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn parse_confusion_csv(text: &str) -> Result<Vec<Vec<f64>>, String> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1).filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|_| format!("line {}: bad value `{v}`", i + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows.len()) {
        return Err("confusion matrix must be square and non-empty".into());
    }
    Ok(rows)
}

/// Fold `k`'s checkpoint on fold `k`'s validation samples, with the split
/// recomputed from the master seed.
pub fn cmd_eval(ctx: &Context, ds: &Dataset, models: &[Model]) -> Result<Evaluation, CliError> {
    let split = kfold(&ds.labels(), models.len(), ctx.seed)?;
    let mut text = String::new();
    let mut cms = Vec::new();
    let mut fold_ac = Vec::new();
    for (k, model) in models.iter().enumerate() {
        if (model.config.window, model.config.width()) != (ds.window, ds.width) {
            return Err(CliError::Model(NnError::Dimension {
                expected: (model.config.window, model.config.width()),
                found: (ds.window, ds.width),
            }));
        }
        let (cce, cm) = evaluate(model, ds, &split.validation(k))?;
        let ac = cm.average_accuracy()?;
        text.push_str(&report(&format!("fold {k} (validation CCE {cce:.6})"), &cm));
        text.push('\n');
        fold_ac.push(ac);
        cms.push(cm);
    }
    let averaged = fold_average(&cms)?;
    let mean = fold_ac.iter().sum::<f64>() / fold_ac.len() as f64;
    writeln!(text, "== fold average").unwrap();
    writeln!(text, "AC per fold: {}", fold_ac.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ")).unwrap();
    writeln!(text, "mean AC: {mean:.4}").unwrap();
    writeln!(text, "average of row-normalized confusion matrices:").unwrap();
    write_matrix(&mut text, &averaged);
    writeln!(text, "class  mean_precision  mean_recall").unwrap();
    for c in 0..NUM_CLASSES {
        let avg = |f: &dyn Fn(usize) -> Option<f64>| {
            let v: Vec<f64> = (0..cms.len()).filter_map(|k| f(k)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let p = avg(&|k| cms[k].precision(c));
        let r = avg(&|k| cms[k].recall(c));
        writeln!(text, "C{c}     {:>14}  {:>11}", fmt_opt(p), fmt_opt(r)).unwrap();
    }
    let written = vec![ctx.write("report.txt", &text)?, ctx.write("confusion.csv", &confusion_csv(&averaged))?];
    ctx.say(format_args!("{text}"));
    record_manifest(ctx, &[], &written)?;
    Ok(Evaluation { fold_ac, averaged, report: text })
}

/// Series names accepted for a curves file.
pub fn available_series() -> Vec<String> {
    let mut v: Vec<String> = ["loss", "ac"].iter().map(|s| s.to_string()).collect();
    v.extend((0..NUM_CLASSES).map(|c| format!("pr:{c}")));
    v.extend(["train_cce", "val_cce", "val_ac"].iter().map(|s| s.to_string()));
    v.extend((0..NUM_CLASSES).map(|c| format!("p_{c}")));
    v.extend((0..NUM_CLASSES).map(|c| format!("r_{c}")));
    v
}

fn column(p: &CurvePoint, name: &str) -> Option<Option<f64>> {
    match name {
        "train_cce" => Some(Some(p.train_cce)),
        "val_cce" => Some(Some(p.val_cce)),
        "val_ac" => Some(Some(p.val_ac)),
        _ => {
            let (kind, c) = name.split_once('_')?;
            let c: usize = c.parse().ok().filter(|&c| c < NUM_CLASSES)?;
            match kind {
                "p" => Some(p.precision[c]),
                "r" => Some(p.recall[c]),
                _ => None,
            }
        }
    }
}

/// Builds the SVG for `series` from a curves CSV.
pub fn curves_svg(curves: &TrainingCurves, series: &str) -> Result<String, CliError> {
    let unknown = || {
        CliError::Plot(format!("unknown series `{series}`; available: {}", available_series().join(", ")))
    };
    let (title, y_label, columns): (String, &str, Vec<(&str, String)>) = match series {
        "loss" => ("Categorical cross-entropy".into(), "CCE", vec![("train", "train_cce".into()), ("validation", "val_cce".into())]),
        "ac" => ("Validation average accuracy".into(), "AC", vec![("validation", "val_ac".into())]),
        s if s.starts_with("pr:") => {
            let c: usize = s[3..].parse().ok().filter(|&c| c < NUM_CLASSES).ok_or_else(unknown)?;
            (format!("Precision and recall, class {c}"), "value", vec![("P", format!("p_{c}")), ("R", format!("r_{c}"))])
        }
        s if available_series().iter().any(|a| a == s) => (s.to_string(), s, vec![(s, s.to_string())]),
        _ => return Err(unknown()),
    };
    let mut lines = Vec::new();
    for fold in curves.folds() {
        for (tag, col) in &columns {
            let points = curves
                .fold(fold)
                .map(|p| (p.epoch as f64, column(p, col).expect("known column")))
                .collect();
            lines.push(Series { name: format!("fold {fold} {tag}"), points });
        }
    }
    Ok(line_chart(&title, "epoch", y_label, &lines))
}

pub fn cmd_plot(ctx: &Context, input: &Path, series: &str, output: Option<&Path>) -> Result<(), CliError> {
    let text = read_text(input)?;
    let svg = if text.starts_with("truth") {
        if series != "confusion" {
            return Err(CliError::Plot(format!("unknown series `{series}` for a confusion matrix; available: confusion")));
        }
        let m = parse_confusion_csv(&text).map_err(|e| input_err(input, e))?;
        heatmap("Average of normalized confusion matrices", &m)
    } else {
        if series == "confusion" {
            return Err(CliError::Plot("series `confusion` needs a confusion.csv input".into()));
        }
        let curves = TrainingCurves::from_csv(&text).map_err(|e| input_err(input, e))?;
        curves_svg(&curves, series)?
    };
    let path = match output {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::Io { path: dir.to_path_buf(), source: e })?;
            }
            fs::write(p, &svg).map_err(|e| CliError::Io { path: p.to_path_buf(), source: e })?;
            p.to_path_buf()
        }
        None => {
            let p = ctx.write(&format!("plots/{}.svg", series.replace(':', "_")), &svg)?;
            record_manifest(ctx, &[], &[p.clone()])?;
            p
        }
    };
    ctx.sayln(format_args!("{}", path.display()));
    Ok(())
}

pub fn cmd_diagnose(model: &Path, log: &Path, tau: f64, smoothing: Option<usize>) -> Result<(), CliError> {
    let model = read_model(model)?;
    let log = read_log(log)?;
    let mut d = Diagnoser::new(&model, tau)?;
    if let Some(k) = smoothing {
        d = d.with_smoothing(k)?;
    }
    let verdicts = crate::diagnoser::replay_with(&log, &mut d)?;
    print!("{}", format_verdicts(&verdicts));
    Ok(())
}

/// Online diagnosis of one held-out catalog fault run.
#[derive(Debug, Clone, PartialEq)]
pub struct HeldOutResult {
    pub class: ClassLabel,
    pub fault: FaultSpec,
    pub sequence: Vec<VerdictKind>,
    /// Warmup first, then Normal, then the correct fault.
    pub ordered: bool,
    pub latency_ms: Option<Millis>,
}

impl HeldOutResult {
    pub fn passed(&self) -> bool {
        self.ordered && self.latency_ms.is_some()
    }
}

/// Simulates one fresh stuck-at run per catalog class (seeds disjoint from
/// the training runs) and replays it through `model`.
pub fn held_out_diagnosis(
    ctx: &Context,
    model: &Model,
    horizon_ms: Millis,
    injection: InjectionWindow,
    tau: f64,
) -> Result<Vec<HeldOutResult>, CliError> {
    let suite = scenario_suite(&ctx.catalog, &ctx.plant, 1, injection, derive_seed(ctx.seed, SALT_HELD_OUT, 0))?;
    let mut out = Vec::new();
    for (i, sc) in suite.iter().enumerate() {
        let (Some(fault), c) = (&sc.fault, sc.label) else { continue };
        if c == ClassLabel::OTHER_FAULT {
            continue;
        }
        let log = run_scenario(&ctx.plant, horizon_ms, &[fault.clone()], derive_seed(ctx.seed, SALT_HELD_OUT, 1 + i as u64))?;
        let verdicts = replay(&log, model, tau)?;
        let sequence = transitions(&verdicts);
        let t_inject = fault.inject_time_ms;
        let first_correct = verdicts.iter().position(|(t, v)| *t >= t_inject && v.kind == VerdictKind::Fault(c));
        let ordered = verdicts.first().is_some_and(|(_, v)| v.kind == VerdictKind::Warmup)
            && first_correct.is_some_and(|k| verdicts[..k].iter().any(|(_, v)| v.kind == VerdictKind::Normal));
        out.push(HeldOutResult { class: c, fault: fault.clone(), sequence, ordered, latency_ms: latency(&verdicts, t_inject, c) });
    }
    Ok(out)
}

pub fn held_out_text(results: &[HeldOutResult]) -> String {
    let mut out = String::from("class  fault                          latency_ms  ordered  verdict sequence\n");
    for r in results {
        let seq: Vec<String> = r.sequence.iter().map(|k| k.to_string()).collect();
        writeln!(
            out,
            "C{}     {:<30} {:>10}  {:<7}  {}",
            r.class,
            r.fault.to_string(),
            r.latency_ms.map_or("never".to_string(), |l| l.to_string()),
            r.ordered,
            seq.join(" > ")
        )
        .unwrap();
    }
    let passed = results.iter().filter(|r| r.passed()).count();
    writeln!(out, "diagnosed {passed} of {} catalog faults", results.len()).unwrap();
    out
}

pub fn cmd_demo(ctx: &Context, a: &DemoArgs) -> Result<(), CliError> {
    let inject = InjectArgs {
        scenarios: None,
        per_class: Some(a.per_class),
        horizon_ms: a.horizon_ms,
        inject_from: a.inject_from,
        inject_to: a.inject_to,
    };
    ctx.note(format_args!("[demo] simulating {} scenarios", a.per_class * NUM_CLASSES));
    let log_paths = cmd_inject(ctx, &inject)?;
    let ds = cmd_dataset(ctx, &log_paths, a.window, 1)?;
    ctx.note(format_args!("[demo] training {} folds on {} windows", a.folds, ds.len()));
    let models = cmd_train(ctx, &ds, a.folds, &a.model, &a.training)?;
    cmd_eval(ctx, &ds, &models)?;
    for series in ["loss", "ac"].into_iter().map(String::from).chain((0..NUM_CLASSES).map(|c| format!("pr:{c}"))) {
        cmd_plot(ctx, &ctx.out.join("curves.csv"), &series, None)?;
    }
    cmd_plot(ctx, &ctx.out.join("confusion.csv"), "confusion", None)?;
    let window = InjectionWindow::fraction(a.horizon_ms, a.inject_from, a.inject_to, ctx.plant.scan_period_ms);
    let results = held_out_diagnosis(ctx, &models[0], a.horizon_ms, window, a.tau)?;
    let text = held_out_text(&results);
    let path = ctx.write("diagnosis_summary.txt", &text)?;
    ctx.say(format_args!("{text}"));
    record_manifest(ctx, &[], &[path])?;
    let m = RunManifest::load(&ctx.out)?;
    m.verify(&ctx.out)?;
    ctx.note(format_args!("[demo] done; {} artifacts in {}", m.artifacts.len(), ctx.out.display()));
    Ok(())
}
