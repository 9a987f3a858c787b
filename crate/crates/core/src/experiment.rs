//! Config-driven runs with reproducible artifacts under
//! `<out_dir>/<run-id>/`.
//!
//! A run is fully determined by its JSON config and seed. The run id hashes
//! the resolved config without the command and output directory, so
//! `train`, `explain` and `benchmark` on one config share a directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::{
    explain_ame, explain_occlusion, explain_saliency, granger_oracle, importance_json, write_importance_csv,
    Estimator, ImportanceReport, ProbeConfig,
};
use crate::benchmark::{
    aggregate_sweep, default_alphas, error_rate, informative_groups, masking_protocol, mge_quality_protocol,
    recall_at_k, score_sweep_model, sweep_trend, test_mge, timing_protocol, BenchmarkResult, MaskingConfig,
    SweepAggregate, SweepRun,
};
use crate::data::{generate, load_csv, standardize, Dataset, Splits, SyntheticSpec};
use crate::error::{Error, Result};
use crate::granger::{granger_targets, kl_divergence};
use crate::model::{build_ame, short_hash, AmeConfig, AmeModel, Task};
use crate::train::{evaluate, fit, FitReport, LogRow, TrainSettings};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    #[default]
    Train,
    Explain,
    Benchmark,
    Sweep,
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub task: Task,
    /// Standardize features with training-split statistics.
    #[serde(default = "yes")]
    pub standardize: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticSpec),
    Csv(CsvData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub estimators: Vec<Estimator>,
    pub split: Split,
    /// Explain only the first `n` samples of the split.
    pub n: Option<usize>,
    pub batch_size: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            estimators: vec![Estimator::Ame, Estimator::Saliency, Estimator::Occlusion { baseline: 0.0 }],
            split: Split::Test,
            n: None,
            batch_size: 32,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Masking,
    MgeQuality,
    Recall,
    Timing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    pub n: usize,
    pub batch_size: usize,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { n: 256, batch_size: 1 }
    }
}

/// An extra model for the MGE-quality protocol: the run's model config with
/// another `alpha`, optionally stopped after `epochs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QualityVariant {
    pub alpha: f64,
    #[serde(default)]
    pub epochs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub protocols: Vec<Protocol>,
    pub masking: MaskingConfig,
    pub recall_k: usize,
    pub timing: TimingConfig,
    pub quality_variants: Vec<QualityVariant>,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            protocols: vec![Protocol::Masking, Protocol::Recall, Protocol::Timing],
            masking: MaskingConfig::default(),
            recall_k: 4,
            timing: TimingConfig::default(),
            quality_variants: vec![
                QualityVariant { alpha: 0.1, epochs: None },
                QualityVariant { alpha: 0.01, epochs: Some(3) },
                QualityVariant { alpha: 0.0, epochs: None },
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    /// Seeds per alpha: `seed, seed + 1, …`.
    pub runs: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alphas: default_alphas(),
            runs: 5,
        }
    }
}

/// A complete, strictly parsed run description.
///
/// `seed` is the only seed that matters: it replaces the seeds of `data`,
/// `model` and `oracle`. `model.n_features` and `model.task` are taken from
/// the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Command,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Write measured seconds into artifacts. Off by default so reruns are
    /// byte-identical.
    pub record_wall_clock: bool,
    pub data: DataConfig,
    pub model: AmeConfig,
    pub training: TrainSettings,
    pub explain: ExplainConfig,
    pub benchmark: BenchmarkConfig,
    pub sweep: SweepConfig,
    pub oracle: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            command: Command::Train,
            seed: 0,
            out_dir: PathBuf::from("runs"),
            record_wall_clock: false,
            data: DataConfig::default(),
            model: AmeConfig::default(),
            training: TrainSettings::default(),
            explain: ExplainConfig::default(),
            benchmark: BenchmarkConfig::default(),
            sweep: SweepConfig::default(),
            oracle: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(json: &str) -> Result<Self> {
        serde_json::from_str(json).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn with_seed(&self, seed: u64) -> RunConfig {
        let mut cfg = self.clone();
        cfg.seed = seed;
        cfg.model.seed = seed;
        cfg.oracle.seed = seed;
        if let DataConfig::Synthetic(spec) = &mut cfg.data {
            spec.seed = seed;
        }
        cfg
    }

    /// Hash of the resolved config, ignoring the command and output directory.
    pub fn run_id(&self) -> Result<String> {
        let mut key = self.with_seed(self.seed);
        key.command = Command::Train;
        key.out_dir = PathBuf::new();
        Ok(short_hash(serde_json::to_string(&key)?.as_bytes()))
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(self.out_dir.join(self.run_id()?))
    }
}

/// Resolved config plus its data.
pub struct Prepared {
    pub config: RunConfig,
    pub splits: Splits,
    /// Informative feature indices, when known by construction.
    pub informative: Option<Vec<usize>>,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    let mut cfg = config.with_seed(config.seed);
    let (splits, informative) = match &cfg.data {
        DataConfig::Synthetic(spec) => (generate(spec)?, Some(spec.informative_set())),
        DataConfig::Csv(c) => {
            let mut s = Splits {
                train: load_csv(&c.train, c.task)?,
                val: load_csv(&c.val, c.task)?,
                test: load_csv(&c.test, c.task)?,
            };
            if c.standardize {
                standardize(&mut s)?;
            }
            (s, None)
        }
    };
    let d = splits.train.n_features();
    if cfg.model.n_features != 0 && cfg.model.n_features != d {
        return Err(Error::Config(format!(
            "model.n_features is {} but the data has {d} features",
            cfg.model.n_features
        )));
    }
    cfg.model.n_features = d;
    cfg.model.task = splits.train.task;
    cfg.model.validate()?;
    Ok(Prepared {
        config: cfg,
        splits,
        informative,
    })
}

/// What a command wrote and what it has to say.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub artifacts: Vec<PathBuf>,
    pub lines: Vec<String>,
}

impl Outcome {
    fn new(run_dir: PathBuf) -> Self {
        Outcome {
            run_dir,
            artifacts: Vec::new(),
            lines: Vec::new(),
        }
    }

    fn wrote(&mut self, path: PathBuf) {
        self.artifacts.push(path);
    }
}

pub fn run(config: &RunConfig, jobs: usize) -> Result<Outcome> {
    match config.command {
        Command::Train => run_train(config),
        Command::Explain => run_explain(config),
        Command::Benchmark => run_benchmark(config),
        Command::Sweep => run_sweep(config, jobs),
        Command::Oracle => run_oracle(config),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn split(splits: &Splits, which: Split) -> &Dataset {
    match which {
        Split::Train => &splits.train,
        Split::Val => &splits.val,
        Split::Test => &splits.test,
    }
}

/// Trains on the prepared data and writes `config.json`, `training_log.csv`
/// and `model.json` into `dir`.
fn train_into(prep: &Prepared, dir: &Path, out: &mut Outcome) -> Result<(AmeModel, FitReport)> {
    fs::create_dir_all(dir)?;
    let cfg = &prep.config;
    let mut model = build_ame(cfg.model.clone())?;
    let report = fit(&mut model, &prep.splits.train, Some(&prep.splits.val), &cfg.training)?;
    for (name, result) in [
        ("config.json", write_json(&dir.join("config.json"), cfg)),
        ("training_log.csv", write_log(&dir.join("training_log.csv"), &report.log)),
        ("model.json", model.save(&dir.join("model.json"))),
    ] {
        result?;
        out.wrote(dir.join(name));
    }
    Ok((model, report))
}

pub fn run_train(config: &RunConfig) -> Result<Outcome> {
    let prep = prepare(config)?;
    let dir = config.run_dir()?;
    let mut out = Outcome::new(dir.clone());
    let (model, report) = train_into(&prep, &dir, &mut out)?;
    let test = evaluate(&model, &prep.splits.test, 512)?;
    out.lines.push(format!(
        "trained {} epochs (best {}{}); run {}",
        report.epochs_run,
        report.best_epoch,
        if report.stopped_early { ", stopped early" } else { "" },
        dir.display()
    ));
    out.lines.push(format!("test main_loss {:.6}", test.main_loss));
    out.lines.push(format!("test mge {:.6}", test.mge));
    if model.task().is_classification() {
        out.lines.push(format!("test error_rate {:.4}", error_rate(&model, &prep.splits.test)?));
    }
    Ok(out)
}

/// Loads the run's model and checks it against the config.
fn load_model(prep: &Prepared, dir: &Path) -> Result<AmeModel> {
    let path = dir.join("model.json");
    if !path.exists() {
        return Err(Error::Config(format!("{} not found; run `train` with this config first", path.display())));
    }
    let model = AmeModel::load(&path)?;
    if model.n_features() != prep.config.model.n_features
        || model.partition() != prep.config.model.resolved_partition().as_slice()
    {
        return Err(Error::Config(format!(
            "model in {} does not match the config's features or partition",
            path.display()
        )));
    }
    Ok(model)
}

fn explain_with(
    model: &AmeModel,
    estimator: Estimator,
    data: &Dataset,
    batch_size: usize,
    wall_clock: bool,
) -> Result<ImportanceReport> {
    let partition = model.partition().to_vec();
    let mut report = match estimator {
        Estimator::Ame => explain_ame(model, &data.x, batch_size)?,
        Estimator::Saliency => explain_saliency(model, &data.x, &partition, batch_size)?,
        Estimator::Occlusion { baseline } => explain_occlusion(model, &data.x, Some(&data.y), &partition, baseline)?,
    };
    if !wall_clock {
        report.seconds = 0.0;
    }
    Ok(report)
}

pub fn run_explain(config: &RunConfig) -> Result<Outcome> {
    let prep = prepare(config)?;
    let cfg = &prep.config;
    let dir = config.run_dir()?;
    let model = load_model(&prep, &dir)?;
    let data = split(&prep.splits, cfg.explain.split);
    let data = match cfg.explain.n {
        Some(n) => data.head(n)?,
        None => data.clone(),
    };
    if cfg.explain.estimators.is_empty() {
        return Err(Error::Config("explain.estimators is empty".into()));
    }
    let mut reports = Vec::new();
    for &e in &cfg.explain.estimators {
        reports.push(explain_with(&model, e, &data, cfg.explain.batch_size, cfg.record_wall_clock)?);
    }
    for rep in &reports {
        for r in 0..rep.n_samples() {
            let sum: f64 = rep.scores.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-6 || rep.scores.row(r).iter().any(|v| *v < 0.0) {
                return Err(Error::Protocol(format!(
                    "{} scores of sample {r} are not a distribution",
                    rep.estimator.name()
                )));
            }
        }
    }
    let mut out = Outcome::new(dir.clone());
    let csv_path = dir.join("importance.csv");
    write_importance_csv(&reports, fs::File::create(&csv_path)?)?;
    out.wrote(csv_path);
    let json_path = dir.join("importance.json");
    write_json(&json_path, &importance_json(&reports)?)?;
    out.wrote(json_path);
    for rep in &reports {
        let flagged = rep.degenerate.iter().filter(|d| **d).count();
        out.lines.push(format!(
            "{}: {} samples, {} forwards, {} backwards{}",
            rep.estimator.name(),
            rep.n_samples(),
            rep.forwards,
            rep.backwards,
            if flagged > 0 { format!(", {flagged} degenerate rows") } else { String::new() }
        ));
    }
    Ok(out)
}

/// Trains the run's model if `model.json` is missing, else loads it.
fn model_for(prep: &Prepared, dir: &Path, out: &mut Outcome) -> Result<AmeModel> {
    if dir.join("model.json").exists() {
        load_model(prep, dir)
    } else {
        Ok(train_into(prep, dir, out)?.0)
    }
}

pub fn run_benchmark(config: &RunConfig) -> Result<Outcome> {
    let prep = prepare(config)?;
    let cfg = &prep.config;
    let bench = &cfg.benchmark;
    let dir = config.run_dir()?;
    let mut out = Outcome::new(dir.clone());
    let model = model_for(&prep, &dir, &mut out)?;
    let hash = model.model_hash()?;
    let seed = cfg.seed;
    let test = &prep.splits.test;
    let mut result = BenchmarkResult::default();
    result.push("summary", "ame", "test_mge", test_mge(&model, test)?, seed, &hash);
    result.push("summary", "ame", "test_main_loss", evaluate(&model, test, 512)?.main_loss, seed, &hash);

    for protocol in &bench.protocols {
        match protocol {
            Protocol::Masking => {
                if !model.task().is_classification() {
                    return Err(Error::Protocol("masking needs a classification task".into()));
                }
                let sub = test.head(bench.masking.n)?;
                for &e in &cfg.explain.estimators {
                    let rep = explain_with(&model, e, &sub, cfg.explain.batch_size, false)?;
                    let m = masking_protocol(
                        &model,
                        &sub.x,
                        &rep,
                        model.partition(),
                        bench.masking.fraction,
                        bench.masking.baseline,
                        seed,
                    )?;
                    let name = e.name();
                    result.push("masking", name, "n_samples", sub.len() as f64, seed, &hash);
                    result.push("masking", name, "groups_masked", m.n_masked as f64, seed, &hash);
                    result.push("masking", name, "mean_informed_drop", m.mean_informed, seed, &hash);
                    result.push("masking", name, "mean_random_drop", m.mean_random, seed, &hash);
                    if let Some(t) = m.paired {
                        result.push("masking", name, "paired_t", t.t, seed, &hash);
                        result.push("masking", name, "paired_p_value", t.p_value, seed, &hash);
                    }
                    out.lines.push(format!(
                        "masking {name}: informed drop {:.4}, random drop {:.4}",
                        m.mean_informed, m.mean_random
                    ));
                }
            }
            Protocol::Recall => {
                let informative = prep
                    .informative
                    .as_ref()
                    .ok_or_else(|| Error::Protocol("recall needs synthetic data with a known informative set".into()))?;
                let truth = informative_groups(model.partition(), informative);
                let sub = match cfg.explain.n {
                    Some(n) => test.head(n)?,
                    None => test.clone(),
                };
                for &e in &cfg.explain.estimators {
                    let rep = explain_with(&model, e, &sub, cfg.explain.batch_size, false)?;
                    let k = bench.recall_k;
                    let hits = recall_at_k(&rep, &truth, k)?;
                    result.push("recall", e.name(), &format!("recall_at_{k}"), hits as f64, seed, &hash);
                    out.lines.push(format!("recall@{k} {}: {hits}", e.name()));
                }
            }
            Protocol::Timing => {
                let sub = test.head(bench.timing.n)?;
                let baseline = bench.masking.baseline;
                for row in timing_protocol(&model, &sub.x, bench.timing.batch_size, baseline)? {
                    let name = row.estimator.as_str();
                    result.push("timing", name, "forwards", row.forwards as f64, seed, &hash);
                    result.push("timing", name, "backwards", row.backwards as f64, seed, &hash);
                    result.push("timing", name, "forwards_ratio", row.forwards_ratio, seed, &hash);
                    if cfg.record_wall_clock {
                        result.push("timing", name, "seconds", row.seconds, seed, &hash);
                        result.push("timing", name, "seconds_ratio", row.seconds_ratio, seed, &hash);
                    }
                    out.lines.push(format!(
                        "timing {name}: {} forwards, {:.4}s ({:.1}x)",
                        row.forwards, row.seconds, row.seconds_ratio
                    ));
                }
            }
            Protocol::MgeQuality => {
                let mut models = Vec::new();
                for v in &bench.quality_variants {
                    let mut mc = cfg.model.clone();
                    mc.alpha = v.alpha;
                    let mut m = build_ame(mc)?;
                    let settings = TrainSettings {
                        epochs: v.epochs.unwrap_or(cfg.training.epochs),
                        ..cfg.training.clone()
                    };
                    fit(&mut m, &prep.splits.train, Some(&prep.splits.val), &settings)?;
                    models.push(m);
                }
                let refs: Vec<&AmeModel> = models.iter().collect();
                let q = mge_quality_protocol(&refs, test, &bench.masking, seed)?;
                for (v, m) in bench.quality_variants.iter().zip(&q.models) {
                    let label = format!("ame(alpha={})", v.alpha);
                    result.push("mge_quality", &label, "test_mge", m.test_mge, seed, &m.model_hash);
                    result.push("mge_quality", &label, "log_odds_drop", m.log_odds_drop, seed, &m.model_hash);
                }
                match q.spearman {
                    Some(rho) => result.push("mge_quality", "ame", "spearman_mge_drop", rho, seed, &hash),
                    None => result.push("mge_quality", "ame", "degenerate", 1.0, seed, &hash),
                }
                out.lines.push(format!("mge_quality spearman: {:?}", q.spearman));
            }
        }
    }
    let path = dir.join("benchmark.csv");
    result.write_csv(fs::File::create(&path)?)?;
    out.wrote(path);
    Ok(out)
}

/// One line of `sweep.csv`: a single run, or the aggregate of one alpha.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub row: String,
    pub alpha: f64,
    pub seed: Option<u64>,
    pub runs: usize,
    pub test_loss: f64,
    pub test_loss_sd: Option<f64>,
    pub test_error: Option<f64>,
    pub test_mge: f64,
    pub test_mge_sd: Option<f64>,
    pub model_hash: String,
}

pub fn sweep_rows(runs: &[SweepRun], aggregates: &[SweepAggregate]) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = runs
        .iter()
        .map(|r| SweepRow {
            row: "run".into(),
            alpha: r.alpha,
            seed: Some(r.seed),
            runs: 1,
            test_loss: r.test_loss,
            test_loss_sd: None,
            test_error: r.test_error,
            test_mge: r.test_mge,
            test_mge_sd: None,
            model_hash: r.model_hash.clone(),
        })
        .collect();
    rows.extend(aggregates.iter().map(|a| SweepRow {
        row: "aggregate".into(),
        alpha: a.alpha,
        seed: None,
        runs: a.runs,
        test_loss: a.loss_mean,
        test_loss_sd: Some(a.loss_sd),
        test_error: None,
        test_mge: a.mge_mean,
        test_mge_sd: Some(a.mge_sd),
        model_hash: String::new(),
    }));
    rows
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Config of one sweep job.
fn job_config(config: &RunConfig, alpha: f64, seed: u64) -> RunConfig {
    let mut job = config.with_seed(seed);
    job.command = Command::Train;
    job.model.alpha = alpha;
    job
}

fn sweep_one(config: &RunConfig, alpha: f64, seed: u64) -> Result<(SweepRun, bool)> {
    let job = job_config(config, alpha, seed);
    let prep = prepare(&job)?;
    let dir = job.run_dir()?;
    if dir.join("model.json").exists() && dir.join("training_log.csv").exists() {
        let model = load_model(&prep, &dir)?;
        let epochs = read_log(&dir.join("training_log.csv"))?.iter().filter(|r| r.split == "train").count();
        return Ok((score_sweep_model(&model, &prep.splits.test, epochs)?, true));
    }
    let mut scratch = Outcome::new(dir.clone());
    let (model, report) = train_into(&prep, &dir, &mut scratch)?;
    Ok((score_sweep_model(&model, &prep.splits.test, report.epochs_run)?, false))
}

/// Trains one model per `(alpha, seed)` in its own run directory, skipping
/// jobs whose model already exists, and writes `sweep.csv`.
pub fn run_sweep(config: &RunConfig, jobs: usize) -> Result<Outcome> {
    let sweep = &config.sweep;
    if sweep.alphas.is_empty() || sweep.runs == 0 {
        return Err(Error::Config("sweep needs at least one alpha and one run".into()));
    }
    let tasks: Vec<(f64, u64)> = sweep
        .alphas
        .iter()
        .flat_map(|&a| (0..sweep.runs as u64).map(move |i| (a, config.seed.wrapping_add(i))))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<Result<(SweepRun, bool)>> = pool.install(|| {
        use rayon::prelude::*;
        tasks.par_iter().map(|&(a, s)| sweep_one(config, a, s)).collect()
    });
    let mut runs = Vec::with_capacity(results.len());
    let mut resumed = 0;
    for r in results {
        let (run, reused) = r?;
        resumed += usize::from(reused);
        runs.push(run);
    }
    runs.sort_by(|a, b| a.alpha.total_cmp(&b.alpha).then(a.seed.cmp(&b.seed)));
    let aggregates = aggregate_sweep(&runs);

    let key = serde_json::to_string(&(config.run_id()?, sweep))?;
    let dir = config.out_dir.join(format!("sweep-{}", short_hash(key.as_bytes())));
    fs::create_dir_all(&dir)?;
    let mut out = Outcome::new(dir.clone());
    write_json(&dir.join("config.json"), config)?;
    out.wrote(dir.join("config.json"));
    let path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for row in sweep_rows(&runs, &aggregates) {
        w.serialize(row)?;
    }
    w.flush()?;
    out.wrote(path);
    out.lines.push(format!("{} runs ({resumed} resumed), {} alphas", runs.len(), aggregates.len()));
    for a in &aggregates {
        out.lines.push(format!(
            "alpha {:.3}: loss {:.5} ± {:.5}, mge {:.5} ± {:.5}",
            a.alpha, a.loss_mean, a.loss_sd, a.mge_mean, a.mge_sd
        ));
    }
    out.lines.push(format!("spearman(alpha, mean mge): {:?}", sweep_trend(&aggregates)));
    Ok(out)
}

/// Mean KL between two target matrices after mixing the reference with 1%
/// of the uniform distribution, so that zero entries stay comparable.
pub fn mean_target_kl(target: &crate::diff::Tensor, reference: &crate::diff::Tensor) -> Result<f64> {
    let (n, p) = target.dims2()?;
    if reference.shape() != target.shape() || n == 0 {
        return Err(Error::Dimension("target matrices differ in shape or are empty".into()));
    }
    let mut total = 0.0;
    for r in 0..n {
        let q: Vec<f64> = reference.row(r).iter().map(|v| 0.99 * v + 0.01 / p as f64).collect();
        total += kl_divergence(target.row(r), &q)?;
    }
    Ok(total / n as f64)
}

/// Independent Granger targets on the test split; writes `oracle.csv`. When
/// the run has a trained model, its in-model targets are compared.
pub fn run_oracle(config: &RunConfig) -> Result<Outcome> {
    let prep = prepare(config)?;
    let cfg = &prep.config;
    let dir = config.run_dir()?;
    fs::create_dir_all(&dir)?;
    let partition = cfg.model.resolved_partition();
    let targets = granger_oracle(&prep.splits.train, &prep.splits.test, &partition, &cfg.oracle)?;
    let p = partition.len();
    let path = dir.join("oracle.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut head = vec!["sample_id".to_string(), "eps_all".to_string()];
    head.extend((1..=p).map(|i| format!("eps_excl_{i}")));
    head.extend((1..=p).map(|i| format!("omega_{i}")));
    w.write_record(&head)?;
    for r in 0..prep.splits.test.len() {
        let mut rec = vec![r.to_string(), targets.eps_all.data()[r].to_string()];
        rec.extend(targets.eps_excl.row(r).iter().map(f64::to_string));
        rec.extend(targets.omega.row(r).iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    let mut out = Outcome::new(dir.clone());
    out.wrote(path);
    let n = prep.splits.test.len() as f64;
    let mean_omega: Vec<f64> = (0..p)
        .map(|i| (0..prep.splits.test.len()).map(|r| targets.omega.row(r)[i]).sum::<f64>() / n)
        .collect();
    out.lines.push(format!("mean oracle omega: {mean_omega:.4?}"));
    if dir.join("model.json").exists() {
        let model = load_model(&prep, &dir)?;
        let fwd = model.forward(&prep.splits.test.x)?;
        let inner = granger_targets(&fwd, &prep.splits.test.y, prep.splits.test.task)?;
        out.lines.push(format!(
            "mean KL(oracle omega || in-model omega): {:.5}",
            mean_target_kl(&targets.omega, &inner.omega)?
        ));
    }
    Ok(out)
}
