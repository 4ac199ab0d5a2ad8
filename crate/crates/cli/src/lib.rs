//! Subcommands behind the `drr` binary. Every command writes its outputs plus
//! a `manifest.json` holding the effective configuration, so a run can be
//! repeated with `--config <out>/manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use drr::attribution::{
    cosine_similarity, lrp_z_batch, mean_relevance, relevance_sparsity, write_relevance_csv, AttributionError,
    RelevanceMap, ScoreMode, DEFAULT_SPARSITY_TAU,
};
use drr::eval::{nested_cv, CvConfig, EvalError, Method};
use drr::model::{build_isotopenet_lite, Checkpoint, ModelError};
use drr::synth::{export_cohort, generate_cohort, import_cohort, Cohort, SynthConfig, SynthError};
use drr::training::{load_penalty_mask, train, TrainConfig, TrainError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    /// 1 usage, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let msg = e.to_string();
        match e {
            EvalError::Singular => CliError::Numeric(msg),
            EvalError::Train { source, .. } => match CliError::from(source) {
                CliError::Numeric(_) => CliError::Numeric(msg),
                _ => CliError::Data(msg),
            },
            _ => CliError::Data(msg),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::Identity(_) | AttributionError::ZeroVector => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "drr", version, about = "Relevance-regularized spectrum classification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-lab cohort.
    Generate(Common),
    /// Train one network on a cohort.
    Train(TrainArgs),
    /// Nested inter-lab cross-validation.
    Cv(CvArgs),
    /// Relevance maps, consistency and sparsity for a checkpoint.
    Attribute(AttributeArgs),
}

#[derive(Args, Debug)]
pub struct Common {
    /// TOML experiment config, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed of the command's config section.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Cohort directory written by `generate`.
    #[arg(long)]
    pub cohort: PathBuf,
    /// Train on this lab only.
    #[arg(long)]
    pub lab: Option<String>,
    /// Sets both penalty weights.
    #[arg(long)]
    pub lambda: Option<f64>,
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Repeat to run several methods; defaults to the config's method.
    #[arg(long)]
    pub method: Vec<Method>,
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cohort: PathBuf,
    /// Lab whose spectra form the training-side subset.
    #[arg(long)]
    pub train_lab: Option<String>,
    /// Lab whose spectra form the test-side subset.
    #[arg(long)]
    pub test_lab: Option<String>,
    /// Bin indices for the per-spectrum relevance table, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub bins: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttributeConfig {
    pub bins: Vec<usize>,
    pub tau: f64,
    pub train_lab: Option<String>,
    pub test_lab: Option<String>,
}

impl Default for AttributeConfig {
    fn default() -> Self {
        Self {
            bins: Vec::new(),
            tau: DEFAULT_SPARSITY_TAU,
            train_lab: None,
            test_lab: None,
        }
    }
}

/// All sections are optional. `[train]` also configures the networks
/// trained by `cv`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub cv: CvConfig,
    pub attribute: AttributeConfig,
}

#[derive(Serialize, Deserialize)]
struct ManifestConfig {
    config: ExperimentConfig,
}

impl ExperimentConfig {
    /// Reads TOML, or the `config` object of a manifest when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        let bad = |e: String| CliError::Data(format!("{}: {e}", path.display()));
        let mut cfg: Self = if path.extension().is_some_and(|x| x == "json") {
            serde_json::from_str::<ManifestConfig>(&text).map_err(|e| bad(e.to_string()))?.config
        } else {
            toml::from_str(&text).map_err(|e| bad(e.to_string()))?
        };
        if cfg.cv.train != TrainConfig::default() {
            return Err(bad("training settings belong in [train], not [cv.train]".into()));
        }
        if cfg.train.penalty_mask.is_none() {
            if let Some(p) = cfg.train.penalty_mask_path.clone() {
                let p = if p.is_relative() { path.parent().unwrap_or(Path::new(".")).join(p) } else { p };
                cfg.train.penalty_mask = Some(load_penalty_mask(&p)?);
            }
        }
        Ok(cfg)
    }

    fn resolve(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: String,
    config: &'a ExperimentConfig,
    seeds: serde_json::Value,
    inputs: serde_json::Value,
    outputs: Vec<String>,
    started_unix_secs: f64,
    wall_time_secs: f64,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Numeric(format!("cannot serialize: {e}")))
}

struct Run<'a> {
    command: &'a str,
    out: &'a Path,
    started: f64,
    clock: Instant,
    outputs: Vec<String>,
}

impl<'a> Run<'a> {
    fn start(command: &'a str, out: &'a Path) -> Result<Self> {
        create_out(out)?;
        Ok(Self {
            command,
            out,
            started: unix_now(),
            clock: Instant::now(),
            outputs: Vec::new(),
        })
    }

    fn write(&mut self, rel: &str, text: &str) -> Result<()> {
        let path = self.out.join(rel);
        if let Some(parent) = path.parent() {
            create_out(parent)?;
        }
        write_file(&path, text)?;
        self.outputs.push(rel.to_string());
        Ok(())
    }

    fn finish(self, config: &ExperimentConfig, seeds: serde_json::Value, inputs: serde_json::Value) -> Result<()> {
        let manifest = Manifest {
            command: self.command,
            version: format!("drr {}", env!("CARGO_PKG_VERSION")),
            config,
            seeds,
            inputs,
            outputs: self.outputs,
            started_unix_secs: self.started,
            wall_time_secs: self.clock.elapsed().as_secs_f64(),
        };
        write_file(&self.out.join(MANIFEST_FILE), &to_json(&manifest)?)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Train(args) => cmd_train(&args),
        Command::Cv(args) => cmd_cv(&args),
        Command::Attribute(args) => cmd_attribute(&args),
    }
}

fn load_cohort(dir: &Path) -> Result<Cohort> {
    Ok(import_cohort(dir)?)
}

pub fn cmd_generate(args: &Common) -> Result<()> {
    let mut cfg = ExperimentConfig::resolve(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.synth.seed = seed;
    }
    cfg.synth.validate()?;
    let mut run = Run::start("generate", &args.out)?;
    let cohort = generate_cohort(&cfg.synth)?;
    export_cohort(&cohort, &args.out)?;
    run.outputs.extend([drr::synth::META_FILE.to_string(), drr::synth::INTENSITIES_FILE.to_string()]);
    let seeds = serde_json::json!({ "synth": cfg.synth.seed });
    run.finish(&cfg, seeds, serde_json::json!({}))
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::resolve(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        cfg.train.seed = seed;
    }
    if let Some(l) = args.lambda {
        cfg.train = cfg.train.with_lambda(l);
    }
    cfg.train.validate()?;
    let cohort = load_cohort(&args.cohort)?;
    let idx: Vec<usize> = (0..cohort.len())
        .filter(|&i| args.lab.as_deref().is_none_or(|lab| cohort.samples[i].lab_id == lab))
        .collect();
    if idx.is_empty() {
        return Err(CliError::Data(format!("no spectra from lab {:?}", args.lab.as_deref().unwrap_or(""))));
    }
    let mut run = Run::start("train", &args.common.out)?;
    let xs: Vec<&[f64]> = idx.iter().map(|&i| cohort.spectrum(i)).collect();
    let ys: Vec<usize> = idx.iter().map(|&i| cohort.samples[i].label).collect();
    let model = build_isotopenet_lite(cohort.n, cohort.classes(), cohort.mz_step, cfg.train.seed)?;
    let (model, report) = train(model, &xs, &ys, &cfg.train)?;
    let mut ck = Checkpoint::new(model, cfg.train.seed);
    ck.metadata.insert("lambda1".into(), cfg.train.lambda1.into());
    ck.metadata.insert("lambda2".into(), cfg.train.lambda2.into());
    ck.metadata.insert("spectra".into(), idx.len().into());
    if let Some(lab) = &args.lab {
        ck.metadata.insert("lab".into(), lab.clone().into());
    }
    run.write("checkpoint.json", &ck.to_json()?)?;
    run.write("loss_history.csv", &report.to_csv())?;
    let seeds = serde_json::json!({ "train": cfg.train.seed });
    let inputs = serde_json::json!({ "cohort": args.cohort, "lab": args.lab });
    run.finish(&cfg, seeds, inputs)
}

pub fn cmd_cv(args: &CvArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::resolve(args.common.config.as_deref())?;
    if let Some(seed) = args.common.seed {
        cfg.cv.seed = seed;
    }
    if let Some(w) = args.workers {
        cfg.cv.workers = w;
    }
    let methods = if args.method.is_empty() { vec![cfg.cv.method] } else { args.method.clone() };
    let cohort = load_cohort(&args.cohort)?;
    let mut run = Run::start("cv", &args.common.out)?;
    let mut summary = String::from("method,spot_balanced_accuracy,patient_balanced_accuracy,models\n");
    for &method in &methods {
        let cv = CvConfig {
            method,
            train: cfg.train.clone(),
            ..cfg.cv.clone()
        };
        cv.validate().map_err(|e| CliError::Data(e.to_string()))?;
        let result = nested_cv(&cohort, &cv)?;
        let report = &result.report;
        report.check_no_leakage(&cohort).map_err(CliError::Numeric)?;
        let dir = method.as_str();
        run.write(&format!("{dir}/cv_report.json"), &to_json(report)?)?;
        run.write(&format!("{dir}/predictions.csv"), &report.predictions_csv())?;
        for o in &result.outcomes {
            let stem = format!("{dir}/checkpoints/{}_fold{}", o.training_lab, o.fold);
            if let Some(model) = &o.model {
                let mut ck = Checkpoint::new(model.clone(), cv.seed);
                let record = report
                    .folds
                    .iter()
                    .find(|f| f.training_lab == o.training_lab && f.fold == o.fold);
                ck.metadata.insert("training_lab".into(), o.training_lab.clone().into());
                ck.metadata.insert("fold".into(), o.fold.into());
                if let Some(l) = record.and_then(|f| f.chosen_lambda) {
                    ck.metadata.insert("lambda".into(), l.into());
                }
                run.write(&format!("{stem}.json"), &ck.to_json()?)?;
            }
            if let Some((bins, lda)) = &o.lda {
                let value = serde_json::json!({ "training_lab": o.training_lab, "fold": o.fold, "bins": bins, "lda": lda });
                run.write(&format!("{stem}_lda.json"), &to_json(&value)?)?;
            }
        }
        summary.push_str(&format!(
            "{method},{},{},{}\n",
            report.spot_balanced_accuracy, report.patient_balanced_accuracy, report.model_count
        ));
    }
    run.write(SUMMARY_FILE, &summary)?;
    let seeds = serde_json::json!({ "cv": cfg.cv.seed });
    let names: Vec<&str> = methods.iter().map(|m| m.as_str()).collect();
    let inputs = serde_json::json!({ "cohort": args.cohort, "methods": names });
    run.finish(&cfg, seeds, inputs)
}

#[derive(Serialize)]
struct ClassConsistency {
    class: usize,
    cosine_train_test: f64,
    train_spectra: usize,
    test_spectra: usize,
}

#[derive(Serialize)]
struct AttributionReport {
    train_lab: Option<String>,
    test_lab: Option<String>,
    tau: f64,
    classes: Vec<ClassConsistency>,
    mean_cosine: f64,
    /// Mean fraction of bins above `tau · max|ρ|`, own-class relevance.
    train_sparsity: f64,
    test_sparsity: f64,
}

fn subset(cohort: &Cohort, lab: Option<&str>) -> Result<Vec<usize>> {
    let idx: Vec<usize> = (0..cohort.len())
        .filter(|&i| lab.is_none_or(|l| cohort.samples[i].lab_id == l))
        .collect();
    if idx.is_empty() {
        return Err(CliError::Data(format!("no spectra from lab {:?}", lab.unwrap_or(""))));
    }
    Ok(idx)
}

fn class_means(ck: &Checkpoint, cohort: &Cohort, idx: &[usize]) -> Result<Vec<Option<RelevanceMap>>> {
    (0..cohort.classes())
        .map(|y| {
            let xs: Vec<&[f64]> = idx
                .iter()
                .filter(|&&i| cohort.samples[i].label == y)
                .map(|&i| cohort.spectrum(i))
                .collect();
            if xs.is_empty() {
                Ok(None)
            } else {
                Ok(Some(mean_relevance(&ck.model, &xs, y)?))
            }
        })
        .collect()
}

fn mean_sparsity(ck: &Checkpoint, cohort: &Cohort, idx: &[usize], tau: f64) -> Result<f64> {
    let xs: Vec<&[f64]> = idx.iter().map(|&i| cohort.spectrum(i)).collect();
    let ys: Vec<usize> = idx.iter().map(|&i| cohort.samples[i].label).collect();
    let maps = lrp_z_batch(&ck.model, &xs, &ys, ScoreMode::Logit)?;
    let mut sum = 0.0;
    for m in &maps {
        sum += relevance_sparsity(&m.values, tau)?;
    }
    Ok(sum / maps.len() as f64)
}

fn relevance_csv(cohort: &Cohort, maps: &[Option<RelevanceMap>]) -> Result<String> {
    let present: Vec<&RelevanceMap> = maps.iter().flatten().collect();
    let mut buf = Vec::new();
    write_relevance_csv(&mut buf, cohort.mz_start, cohort.mz_step, &present)?;
    Ok(String::from_utf8(buf).expect("csv is utf-8"))
}

pub fn cmd_attribute(args: &AttributeArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::resolve(args.common.config.as_deref())?;
    if args.train_lab.is_some() {
        cfg.attribute.train_lab = args.train_lab.clone();
    }
    if args.test_lab.is_some() {
        cfg.attribute.test_lab = args.test_lab.clone();
    }
    if !args.bins.is_empty() {
        cfg.attribute.bins = args.bins.clone();
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cohort = load_cohort(&args.cohort)?;
    if ck.model.input_len() != cohort.n {
        return Err(CliError::Data(format!(
            "checkpoint expects {} bins, cohort has {}",
            ck.model.input_len(),
            cohort.n
        )));
    }
    if let Some(&b) = cfg.attribute.bins.iter().find(|&&b| b >= cohort.n) {
        return Err(CliError::Usage(format!("bin {b} is outside 0..{}", cohort.n)));
    }
    let a = &cfg.attribute;
    let train_idx = subset(&cohort, a.train_lab.as_deref())?;
    let test_idx = subset(&cohort, a.test_lab.as_deref())?;
    let mut run = Run::start("attribute", &args.common.out)?;

    let train_means = class_means(&ck, &cohort, &train_idx)?;
    let test_means = class_means(&ck, &cohort, &test_idx)?;
    run.write("mean_relevance_train.csv", &relevance_csv(&cohort, &train_means)?)?;
    run.write("mean_relevance_test.csv", &relevance_csv(&cohort, &test_means)?)?;

    let mut classes = Vec::new();
    for (y, (u, v)) in train_means.iter().zip(&test_means).enumerate() {
        if let (Some(u), Some(v)) = (u, v) {
            let count = |idx: &[usize]| idx.iter().filter(|&&i| cohort.samples[i].label == y).count();
            classes.push(ClassConsistency {
                class: y,
                cosine_train_test: cosine_similarity(&u.values, &v.values)?,
                train_spectra: count(&train_idx),
                test_spectra: count(&test_idx),
            });
        }
    }
    let mean_cosine = classes.iter().map(|c| c.cosine_train_test).sum::<f64>() / classes.len().max(1) as f64;
    let report = AttributionReport {
        train_lab: a.train_lab.clone(),
        test_lab: a.test_lab.clone(),
        tau: a.tau,
        classes,
        mean_cosine,
        train_sparsity: mean_sparsity(&ck, &cohort, &train_idx, a.tau)?,
        test_sparsity: mean_sparsity(&ck, &cohort, &test_idx, a.tau)?,
    };
    run.write("attribution_report.json", &to_json(&report)?)?;

    if !a.bins.is_empty() {
        let mut text = String::from("sample_id,patient_id,lab_id,label");
        for &b in &a.bins {
            for y in 0..cohort.classes() {
                text.push_str(&format!(",bin{b}_class{y}"));
            }
        }
        text.push('\n');
        let xs: Vec<&[f64]> = (0..cohort.len()).map(|i| cohort.spectrum(i)).collect();
        let per_class = (0..cohort.classes())
            .map(|y| lrp_z_batch(&ck.model, &xs, &vec![y; xs.len()], ScoreMode::Logit))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        for (i, s) in cohort.samples.iter().enumerate() {
            text.push_str(&format!("{},{},{},{}", s.id, s.patient_id, s.lab_id, s.label));
            for &b in &a.bins {
                for maps in &per_class {
                    text.push_str(&format!(",{}", maps[i].values[b]));
                }
            }
            text.push('\n');
        }
        run.write("spot_relevance.csv", &text)?;
    }
    let inputs = serde_json::json!({ "checkpoint": args.checkpoint, "cohort": args.cohort });
    run.finish(&cfg, serde_json::json!({ "checkpoint": ck.seed }), inputs)
}
