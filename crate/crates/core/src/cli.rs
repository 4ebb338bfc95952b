//! `mvtta` command line. Each subcommand reads and writes files only, so
//! stages can be run, swapped, and re-run independently.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::evaluation::{self, BaselineReport, SweepFile, DEFAULT_SWEEP_POINTS};
use crate::prediction_store::{load_manifest, save_manifest};
use crate::stage1::{fit, OptimalViewTable};
use crate::stage2::{decision_accuracy, infer_decisions, save_decisions, Threshold};
use crate::synthetic::{self, load_features, save_features, ModelConfig, SynthConfig, ToyModel};
use crate::uncertainty::{MetricConfig, MetricKind};

pub const TRAIN_FEATURES_FILE: &str = "train_features.jsonl";
pub const TEST_FEATURES_FILE: &str = "test_features.jsonl";

#[derive(Debug, Parser)]
#[command(name = "mvtta", version, about = "Uncertainty-gated multi-view test-time augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic train/test feature sets.
    Synth(SynthArgs),
    /// Train the linear softmax model on default-view features.
    Train(TrainArgs),
    /// Emit a prediction manifest from a model and a feature set.
    Predict(PredictArgs),
    /// Fit the per-class optimal view table from a training manifest.
    FitViews(FitViewsArgs),
    /// Run gated TTA at one threshold.
    Infer(InferArgs),
    /// Sweep the threshold and compute baselines.
    Sweep(SweepArgs),
    /// Render tables and sweep curves from sweep files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for the two feature files.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Stochastic dropout passes per view (0 disables).
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitViewsArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vtable: PathBuf,
    /// Must match the metric the view table was fitted with.
    #[arg(long)]
    metric: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    #[arg(long)]
    force_apply: bool,
    /// Optional JSON Lines dump of every decision.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    vtable: PathBuf,
    #[arg(long)]
    metric: Option<String>,
    #[arg(long)]
    points: Option<usize>,
    /// Seed of the random-augmentation baseline.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Sweep files written by `sweep`, one per metric.
    #[arg(long = "sweep", required = true)]
    sweeps: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Structured run configuration, one section per stage.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub predict: PredictSection,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSection {
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for PredictSection {
    fn default() -> Self {
        PredictSection {
            mc_samples: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub metric: MetricKind,
    pub odin_temperature: f64,
    pub mcd_min_samples: usize,
    pub tau: Option<f64>,
    pub points: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        let m = MetricConfig::new(MetricKind::Entropy);
        EvalSection {
            metric: m.kind,
            odin_temperature: m.odin_temperature,
            mcd_min_samples: m.mcd_min_samples,
            tau: None,
            points: DEFAULT_SWEEP_POINTS,
            seed: 0,
        }
    }
}

impl EvalSection {
    fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            kind: self.metric,
            odin_temperature: self.odin_temperature,
            mcd_min_samples: self.mcd_min_samples,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    fn resolve(arg: &ConfigArg) -> Result<Self> {
        match &arg.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::default()),
        }
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

fn echo(command: &str, resolved: serde_json::Value) {
    eprintln!("{command}: resolved config {resolved}");
}

/// Parses `argv` and runs the subcommand. Returns the process exit code:
/// 0 on success, 1 on a domain error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::FitViews(a) => fit_views(a),
        Command::Infer(a) => infer(a),
        Command::Sweep(a) => sweep(a),
        Command::Report(a) => report(a),
    }
}

fn synth(args: SynthArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&args.config)?.synth;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = absolute(&args.out)?;
    echo("synth", json!({ "synth": cfg, "out": out }));
    let (train, test) = synthetic::generate(&cfg)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    save_features(&train, out.join(TRAIN_FEATURES_FILE))?;
    save_features(&test, out.join(TEST_FEATURES_FILE))?;
    println!(
        "wrote {} train and {} test samples to {}",
        train.samples.len(),
        test.samples.len(),
        out.display()
    );
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&args.config)?.model;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (features, out) = (absolute(&args.features)?, absolute(&args.out)?);
    echo("train", json!({ "model": cfg, "features": features, "out": out }));
    let set = load_features(&features)?;
    let (model, summary) = synthetic::train(&set, &cfg)?;
    model.save(&out)?;
    println!(
        "final_loss={} train_accuracy={}",
        summary.final_loss, summary.train_accuracy
    );
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let mut cfg = RunConfig::resolve(&args.config)?.predict;
    if let Some(m) = args.mc_samples {
        cfg.mc_samples = m;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let (model_path, features, out) = (
        absolute(&args.model)?,
        absolute(&args.features)?,
        absolute(&args.out)?,
    );
    echo(
        "predict",
        json!({ "predict": cfg, "model": model_path, "features": features, "out": out }),
    );
    let model = ToyModel::load(&model_path)?;
    let set = load_features(&features)?;
    let manifest = synthetic::predict(&model, &set, cfg.mc_samples, cfg.seed)?;
    save_manifest(&manifest, &out)?;
    println!("wrote {} records to {}", manifest.records.len(), out.display());
    Ok(())
}

fn fit_views(args: FitViewsArgs) -> Result<()> {
    let mut eval = RunConfig::resolve(&args.config)?.eval;
    if let Some(name) = &args.metric {
        eval.metric = name.parse()?;
    }
    let metric = eval.metric_config();
    metric.check()?;
    let (manifest_path, out) = (absolute(&args.manifest)?, absolute(&args.out)?);
    echo(
        "fit-views",
        json!({ "metric": metric, "manifest": manifest_path, "out": out }),
    );
    let train = load_manifest(&manifest_path)?;
    let (counts, table) = fit(&train, &metric)?;
    if !table.fallback_classes.is_empty() {
        eprintln!(
            "warning: classes {:?} have no training records; using the most selected view",
            table.fallback_classes
        );
    }
    table.save(&out)?;
    for (c, view) in table.per_class.iter().enumerate() {
        println!("class {c}: {view} counts={:?}", counts.row(c));
    }
    Ok(())
}

/// The table's metric is authoritative; an explicit `--metric` must agree.
fn table_metric(table: &OptimalViewTable, requested: Option<&str>) -> Result<MetricConfig> {
    if let Some(name) = requested {
        let kind: MetricKind = name.parse()?;
        if kind != table.metric.kind {
            return Err(Error::MetricMismatch {
                table: table.metric.kind,
                requested: kind,
            });
        }
    }
    Ok(table.metric)
}

fn infer(args: InferArgs) -> Result<()> {
    let eval = RunConfig::resolve(&args.config)?.eval;
    let tau = args.tau.or(eval.tau);
    let (manifest_path, vtable_path) = (absolute(&args.manifest)?, absolute(&args.vtable)?);
    let out = args.out.as_deref().map(absolute).transpose()?;
    let table = OptimalViewTable::load(&vtable_path)?;
    let metric = table_metric(&table, args.metric.as_deref())?;
    let tau = match (tau, args.force_apply) {
        (Some(t), _) => Threshold::new(t)?,
        // the gate is bypassed, any finite value will do
        (None, true) => Threshold::new(0.0)?,
        (None, false) => {
            return Err(Error::InvalidConfig(
                "infer needs --tau (or eval.tau in the config) unless --force-apply is set".into(),
            ))
        }
    };
    echo(
        "infer",
        json!({
            "metric": metric, "tau": tau.value(), "force_apply": args.force_apply,
            "manifest": manifest_path, "vtable": vtable_path, "out": out,
        }),
    );
    let test = load_manifest(&manifest_path)?;
    let decisions = infer_decisions(&test, &table, tau, &metric, args.force_apply)?;
    if let Some(out) = &out {
        save_decisions(&decisions, out)?;
    }
    let augmented = decisions.iter().filter(|d| d.applied).count();
    println!("augmented={augmented}/{}", decisions.len());
    if test.records.iter().all(|r| r.true_class.is_some()) {
        println!("accuracy={}", decision_accuracy(&test, &decisions)?);
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let eval = RunConfig::resolve(&args.config)?.eval;
    let points = args.points.unwrap_or(eval.points);
    let seed = args.seed.unwrap_or(eval.seed);
    let (manifest_path, vtable_path, out) = (
        absolute(&args.manifest)?,
        absolute(&args.vtable)?,
        absolute(&args.out)?,
    );
    let table = OptimalViewTable::load(&vtable_path)?;
    let metric = table_metric(&table, args.metric.as_deref())?;
    echo(
        "sweep",
        json!({
            "metric": metric, "points": points, "seed": seed,
            "manifest": manifest_path, "vtable": vtable_path, "out": out,
        }),
    );
    let test = load_manifest(&manifest_path)?;
    let result = evaluation::sweep(&test, &table, &metric, points)?;
    let baselines = BaselineReport::compute(&test, seed)?;
    for (i, ((tau, acc), n)) in result
        .taus
        .iter()
        .zip(&result.accuracies)
        .zip(&result.n_augmented)
        .enumerate()
    {
        println!("point={i} tau={tau} accuracy={acc} augmented={n}");
    }
    println!(
        "best_index={} best_accuracy={} single_view_accuracy={} random_aug_accuracy={}",
        result.best_index,
        result.best_accuracy,
        baselines.single_view_accuracy,
        baselines.random_aug_accuracy
    );
    SweepFile {
        baselines,
        sweep: result,
    }
    .save(&out)
}

fn report(args: ReportArgs) -> Result<()> {
    let paths = args
        .sweeps
        .iter()
        .map(|p| absolute(p))
        .collect::<Result<Vec<_>>>()?;
    let out = absolute(&args.out)?;
    echo("report", json!({ "sweeps": paths, "out": out }));
    let files = paths
        .iter()
        .map(SweepFile::load)
        .collect::<Result<Vec<_>>>()?;
    let baselines = files[0].baselines.clone();
    if let Some(f) = files.iter().find(|f| f.baselines != baselines) {
        return Err(Error::InvalidInput(format!(
            "sweep files disagree on baselines ({:?} vs {:?}); were they run on the same manifest and seed?",
            baselines, f.baselines
        )));
    }
    let sweeps: Vec<_> = files.into_iter().map(|f| f.sweep).collect();
    let written = evaluation::report(&baselines, &sweeps, &out)?;
    println!("{}", written.comparison_csv.display());
    println!("{}", written.per_metric_csv.display());
    println!("{}", written.summary_json.display());
    for c in &written.curves {
        println!("{}", c.display());
    }
    Ok(())
}
