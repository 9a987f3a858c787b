//! Evaluation protocols: masking by importance rank (change in log odds),
//! correlation of test MGE with masking quality, the α sweep, recall@k
//! against known informative groups, and estimator timing.

use std::io::{Read, Write};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{explain_ame, explain_occlusion, explain_saliency, ImportanceReport, Predictor};
use crate::data::{argmax, Dataset, Splits};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::granger::{granger_targets, mge};
use crate::model::{build_ame, AmeConfig, AmeModel, Task};
use crate::stats::{mean, paired_t, sd, spearman, PairedTest};
use crate::train::{evaluate, fit, TrainSettings};

/// Probabilities are clamped to `[Q_CLAMP, 1 − Q_CLAMP]` before the logit.
pub const Q_CLAMP: f64 = 1e-9;

pub fn log_odds(q: f64) -> f64 {
    let q = q.clamp(Q_CLAMP, 1.0 - Q_CLAMP);
    (q / (1.0 - q)).ln()
}

/// Number of groups masked for `fraction` of `p`; at least one.
pub fn masked_count(fraction: f64, p: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Protocol(format!("masking fraction must lie in (0, 1], got {fraction}")));
    }
    Ok(((fraction * p as f64).ceil() as usize).clamp(1, p))
}

/// Groups with any informative feature, by group index.
pub fn informative_groups(partition: &[Vec<usize>], informative: &[usize]) -> Vec<usize> {
    partition
        .iter()
        .enumerate()
        .filter(|(_, g)| g.iter().any(|f| informative.contains(f)))
        .map(|(i, _)| i)
        .collect()
}

/// Indices of the `k` largest scores; ties go to the lowest index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Per-sample drop in log odds of the originally predicted class after
/// setting the features of `masks[r]` to `baseline` in sample `r`.
pub fn log_odds_drops<M: Predictor + ?Sized>(
    model: &M,
    x: &Tensor,
    partition: &[Vec<usize>],
    masks: &[Vec<usize>],
    baseline: f64,
) -> Result<Vec<f64>> {
    if !model.task().is_classification() {
        return Err(Error::Protocol("masking needs a classification model".into()));
    }
    if masks.len() != x.rows() {
        return Err(Error::Dimension(format!("{} masks for {} samples", masks.len(), x.rows())));
    }
    let orig = predict(model, x)?;
    let mut masked = x.clone();
    let d = x.shape()[1];
    for (r, groups) in masks.iter().enumerate() {
        for &i in groups {
            let group = partition
                .get(i)
                .ok_or_else(|| Error::Protocol(format!("group {i} out of range")))?;
            for &f in group {
                masked.data_mut()[r * d + f] = baseline;
            }
        }
    }
    let after = predict(model, &masked)?;
    Ok((0..x.rows())
        .map(|r| {
            let c = argmax(orig.row(r));
            log_odds(orig.row(r)[c]) - log_odds(after.row(r)[c])
        })
        .collect())
}

fn predict<M: Predictor + ?Sized>(model: &M, x: &Tensor) -> Result<Tensor> {
    let mut g = crate::diff::Graph::new();
    let xv = g.constant(x.clone());
    let y = model.predict_graph(&mut g, xv)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingResult {
    pub n_masked: usize,
    /// Per-sample log-odds drops for the top-ranked groups.
    pub informed: Vec<f64>,
    /// Per-sample log-odds drops for uniformly chosen groups.
    pub random: Vec<f64>,
    pub mean_informed: f64,
    pub mean_random: f64,
    /// Paired test of informed − random; `None` if the differences are constant.
    pub paired: Option<PairedTest>,
}

/// Masks the top `⌈fraction·p⌉` groups of each sample by `report` score and,
/// as a control, the same number of uniformly drawn groups.
pub fn masking_protocol<M: Predictor + ?Sized>(
    model: &M,
    x: &Tensor,
    report: &ImportanceReport,
    partition: &[Vec<usize>],
    fraction: f64,
    baseline: f64,
    seed: u64,
) -> Result<MaskingResult> {
    let p = partition.len();
    if report.n_groups() != p || report.n_samples() != x.rows() {
        return Err(Error::Dimension(format!(
            "report {:?} does not cover {} samples over {p} groups",
            report.scores.shape(),
            x.rows()
        )));
    }
    let m = masked_count(fraction, p)?;
    let informed_masks: Vec<Vec<usize>> = (0..x.rows()).map(|r| top_k(report.scores.row(r), m)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_masks: Vec<Vec<usize>> = (0..x.rows()).map(|_| sample(&mut rng, p, m).into_vec()).collect();
    let informed = log_odds_drops(model, x, partition, &informed_masks, baseline)?;
    let random = log_odds_drops(model, x, partition, &random_masks, baseline)?;
    Ok(MaskingResult {
        n_masked: m,
        mean_informed: mean(&informed),
        mean_random: mean(&random),
        paired: paired_t(&informed, &random),
        informed,
        random,
    })
}

/// Test-set MGE of the in-model targets against the attention read-out.
pub fn test_mge(model: &AmeModel, test: &Dataset) -> Result<f64> {
    let out = model.forward(&test.x)?;
    let targets = granger_targets(&out, &test.y, test.task)?;
    mge(&targets.omega, &out.attention)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelQuality {
    pub model_hash: String,
    pub test_mge: f64,
    pub log_odds_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MgeQualityResult {
    pub models: Vec<ModelQuality>,
    /// Spearman correlation of test MGE and log-odds drop; `None` when
    /// undefined.
    pub spearman: Option<f64>,
    pub degenerate: bool,
}

/// Masking parameters shared by the protocols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    pub fraction: f64,
    pub baseline: f64,
    /// Number of test samples masked.
    pub n: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        MaskingConfig {
            fraction: 0.1,
            baseline: 0.0,
            n: 100,
        }
    }
}

/// Rank correlation, over at least three models, between each model's test
/// MGE and the log-odds drop of masking by its own attention.
pub fn mge_quality_protocol(
    models: &[&AmeModel],
    test: &Dataset,
    masking: &MaskingConfig,
    seed: u64,
) -> Result<MgeQualityResult> {
    if models.len() < 3 {
        return Err(Error::Protocol(format!("MGE quality needs at least 3 models, got {}", models.len())));
    }
    let sub = test.head(masking.n)?;
    let mut rows = Vec::with_capacity(models.len());
    for model in models {
        let report = explain_ame(model, &sub.x, 256)?;
        let res = masking_protocol(*model, &sub.x, &report, model.partition(), masking.fraction, masking.baseline, seed)?;
        rows.push(ModelQuality {
            model_hash: model.model_hash()?,
            test_mge: test_mge(model, test)?,
            log_odds_drop: res.mean_informed,
        });
    }
    let mges: Vec<f64> = rows.iter().map(|r| r.test_mge).collect();
    let drops: Vec<f64> = rows.iter().map(|r| r.log_odds_drop).collect();
    let rho = spearman(&mges, &drops);
    Ok(MgeQualityResult {
        models: rows,
        spearman: rho,
        degenerate: rho.is_none(),
    })
}

/// Count of informative groups among the top `k` groups by mean score.
pub fn recall_at_k(report: &ImportanceReport, truth: &[usize], k: usize) -> Result<usize> {
    if k > report.n_groups() {
        return Err(Error::Protocol(format!("k = {k} exceeds {} groups", report.n_groups())));
    }
    let avg = report.mean_scores()?;
    Ok(top_k(&avg, k).iter().filter(|i| truth.contains(i)).count())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub alpha: f64,
    pub seed: u64,
    /// Test main loss (MSE or cross-entropy).
    pub test_loss: f64,
    /// Test error rate; absent for regression.
    pub test_error: Option<f64>,
    pub test_mge: f64,
    pub epochs: usize,
    pub model_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepAggregate {
    pub alpha: f64,
    pub runs: usize,
    pub loss_mean: f64,
    pub loss_sd: f64,
    pub mge_mean: f64,
    pub mge_sd: f64,
}

/// Fraction of misclassified rows.
pub fn error_rate(model: &AmeModel, data: &Dataset) -> Result<f64> {
    let (y, _) = model.predict(&data.x)?;
    let labels = data.labels();
    let wrong = (0..data.len()).filter(|&r| argmax(y.row(r)) != labels[r]).count();
    Ok(wrong as f64 / data.len().max(1) as f64)
}

/// Trains and scores one model of a sweep.
pub fn sweep_job(template: &AmeConfig, splits: &Splits, settings: &TrainSettings, alpha: f64, seed: u64) -> Result<(AmeModel, SweepRun)> {
    let mut model = build_ame(AmeConfig {
        alpha,
        seed,
        ..template.clone()
    })?;
    let report = fit(&mut model, &splits.train, Some(&splits.val), settings)?;
    let run = score_sweep_model(&model, &splits.test, report.epochs_run)?;
    Ok((model, run))
}

/// Test metrics of an already trained sweep model.
pub fn score_sweep_model(model: &AmeModel, test: &Dataset, epochs: usize) -> Result<SweepRun> {
    let m = evaluate(model, test, 512)?;
    Ok(SweepRun {
        alpha: model.config().alpha,
        seed: model.config().seed,
        test_loss: m.main_loss,
        test_error: match model.task() {
            Task::Classification { .. } => Some(error_rate(model, test)?),
            Task::Regression => None,
        },
        test_mge: m.mge,
        epochs,
        model_hash: model.model_hash()?,
    })
}

/// Mean and sample standard deviation per α, in ascending α order.
pub fn aggregate_sweep(runs: &[SweepRun]) -> Vec<SweepAggregate> {
    let mut alphas: Vec<f64> = runs.iter().map(|r| r.alpha).collect();
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    alphas
        .into_iter()
        .map(|alpha| {
            let mut sel: Vec<&SweepRun> = runs.iter().filter(|r| r.alpha == alpha).collect();
            sel.sort_by_key(|r| r.seed);
            let loss: Vec<f64> = sel.iter().map(|r| r.test_loss).collect();
            let mges: Vec<f64> = sel.iter().map(|r| r.test_mge).collect();
            SweepAggregate {
                alpha,
                runs: sel.len(),
                loss_mean: mean(&loss),
                loss_sd: sd(&loss),
                mge_mean: mean(&mges),
                mge_sd: sd(&mges),
            }
        })
        .collect()
}

/// Spearman correlation of α against mean test MGE over the aggregates.
pub fn sweep_trend(aggregates: &[SweepAggregate]) -> Option<f64> {
    let a: Vec<f64> = aggregates.iter().map(|r| r.alpha).collect();
    let m: Vec<f64> = aggregates.iter().map(|r| r.mge_mean).collect();
    spearman(&a, &m)
}

/// The default grid `0, 0.01, …, 0.1`.
pub fn default_alphas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 100.0).collect()
}

/// Sequential sweep over `alphas × seeds`.
pub fn alpha_sweep(
    template: &AmeConfig,
    splits: &Splits,
    settings: &TrainSettings,
    alphas: &[f64],
    seeds: &[u64],
) -> Result<(Vec<SweepRun>, Vec<SweepAggregate>)> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one alpha and one seed".into()));
    }
    let mut runs = Vec::with_capacity(alphas.len() * seeds.len());
    for &alpha in alphas {
        for &seed in seeds {
            runs.push(sweep_job(template, splits, settings, alpha, seed)?.1);
        }
    }
    let agg = aggregate_sweep(&runs);
    Ok((runs, agg))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub estimator: String,
    pub seconds: f64,
    pub forwards: usize,
    pub backwards: usize,
    /// Relative to the AME read-out.
    pub seconds_ratio: f64,
    pub forwards_ratio: f64,
}

/// Runs the three estimators on the same samples; the AME read-out and
/// saliency run at `batch_size`, occlusion one sample at a time.
pub fn timing_protocol(model: &AmeModel, x: &Tensor, batch_size: usize, baseline: f64) -> Result<Vec<TimingRow>> {
    let partition = model.partition().to_vec();
    let reports = [
        explain_ame(model, x, batch_size)?,
        explain_saliency(model, x, &partition, batch_size)?,
        explain_occlusion(model, x, None, &partition, baseline)?,
    ];
    let (s0, f0) = (reports[0].seconds, reports[0].forwards as f64);
    Ok(reports
        .iter()
        .map(|r| TimingRow {
            estimator: r.estimator.name().to_string(),
            seconds: r.seconds,
            forwards: r.forwards,
            backwards: r.backwards,
            seconds_ratio: r.seconds / s0,
            forwards_ratio: r.forwards as f64 / f0,
        })
        .collect())
}

/// One metric in long format; every row names the seed and model it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub protocol: String,
    pub estimator: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub model_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub rows: Vec<MetricRow>,
}

impl BenchmarkResult {
    pub fn push(&mut self, protocol: &str, estimator: &str, metric: &str, value: f64, seed: u64, model_hash: &str) {
        self.rows.push(MetricRow {
            protocol: protocol.to_string(),
            estimator: estimator.to_string(),
            metric: metric.to_string(),
            value,
            seed,
            model_hash: model_hash.to_string(),
        });
    }

    pub fn get(&self, protocol: &str, estimator: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.protocol == protocol && r.estimator == estimator && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in &self.rows {
            w.serialize(row)?;
        }
        if self.rows.is_empty() {
            w.write_record(["protocol", "estimator", "metric", "value", "seed", "model_hash"])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<std::result::Result<Vec<MetricRow>, _>>()?;
        Ok(BenchmarkResult { rows })
    }
}
