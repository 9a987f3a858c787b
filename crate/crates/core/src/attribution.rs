//! Per-sample feature-group importance: the AME attention read-out, input
//! gradient saliency, occlusion, and an independent Granger oracle built from
//! separately trained probe networks.

use std::io::{Read, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{argmax, Dataset};
use crate::diff::{Activation, Graph, Optimizer, Tensor, Var};
use crate::error::{Error, Result};
use crate::granger::{delta_epsilon, error_rows, omega_matrix, GrangerTargets};
use crate::model::{short_hash, validate_partition, AmeModel, MlpModel, Task};

/// Probabilities are floored here before taking logarithms.
const PROB_FLOOR: f64 = 1e-12;

/// A model that can be differentiated from its inputs to its prediction.
pub trait Predictor {
    fn task(&self) -> Task;
    fn n_features(&self) -> usize;
    /// Head output `(B, k)`: the regression value or class probabilities.
    fn predict_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var>;
    fn model_id(&self) -> Result<String>;
}

impl Predictor for AmeModel {
    fn task(&self) -> Task {
        AmeModel::task(self)
    }

    fn n_features(&self) -> usize {
        AmeModel::n_features(self)
    }

    fn predict_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        Ok(self.forward_graph(g, x, false)?.y)
    }

    fn model_id(&self) -> Result<String> {
        self.model_hash()
    }
}

impl Predictor for MlpModel {
    fn task(&self) -> Task {
        MlpModel::task(self)
    }

    fn n_features(&self) -> usize {
        MlpModel::n_features(self)
    }

    fn predict_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        self.forward_graph(g, x)
    }

    fn model_id(&self) -> Result<String> {
        let mut bytes = Vec::new();
        for (name, t) in self.params().named() {
            bytes.extend_from_slice(name.as_bytes());
            t.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(short_hash(&bytes))
    }
}

/// Wraps a model and counts every forward and backward pass made through it.
struct Counted<'m, M: ?Sized> {
    model: &'m M,
    forwards: usize,
    backwards: usize,
}

impl<'m, M: Predictor + ?Sized> Counted<'m, M> {
    fn new(model: &'m M) -> Self {
        Counted {
            model,
            forwards: 0,
            backwards: 0,
        }
    }

    fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forwards += 1;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.model.predict_graph(&mut g, xv)?;
        Ok(g.value(y).clone())
    }

    /// Gradient of the summed per-row saliency target w.r.t. the inputs.
    fn input_gradient(&mut self, x: &Tensor) -> Result<Tensor> {
        self.forwards += 1;
        let mut g = Graph::new();
        let xv = g.input(x.clone(), true);
        let y = self.model.predict_graph(&mut g, xv)?;
        let rows = g.value(y).rows();
        let per_row = match self.model.task() {
            Task::Regression => g.select_cols(y, &[0])?,
            Task::Classification { .. } => {
                let top: Vec<usize> = (0..rows).map(|r| argmax(g.value(y).row(r))).collect();
                let q = g.pick_per_row(y, &top)?;
                let q = g.add_scalar(q, PROB_FLOOR);
                g.ln(q)?
            }
        };
        let mean = g.mean(per_row)?;
        let total = g.scale(mean, rows as f64);
        self.backwards += 1;
        let grads = g.backward(total)?;
        grads
            .get(xv)
            .cloned()
            .ok_or_else(|| Error::Protocol("prediction does not depend differentiably on the inputs".into()))
    }
}

/// Maps signed raw scores onto the simplex via `|e_i| / Σ_j |e_j|`. An
/// all-zero input gives the uniform distribution and sets the flag.
pub fn normalize_scores(raw: &[f64]) -> (Vec<f64>, bool) {
    let total: f64 = raw.iter().map(|v| v.abs()).sum();
    if total > 0.0 && total.is_finite() {
        (raw.iter().map(|v| v.abs() / total).collect(), false)
    } else {
        let p = raw.len().max(1) as f64;
        (vec![1.0 / p; raw.len()], true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Estimator {
    Ame,
    Saliency,
    Occlusion {
        #[serde(default)]
        baseline: f64,
    },
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::Ame => "ame",
            Estimator::Saliency => "saliency",
            Estimator::Occlusion { .. } => "occlusion",
        }
    }
}

/// Importance scores for `n` samples over `p` groups with cost accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceReport {
    pub estimator: Estimator,
    pub model_id: String,
    /// `(n, p)`, one distribution per row.
    pub scores: Tensor,
    /// Rows where the raw scores were all zero.
    pub degenerate: Vec<bool>,
    pub seconds: f64,
    pub forwards: usize,
    pub backwards: usize,
}

impl ImportanceReport {
    pub fn n_samples(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_groups(&self) -> usize {
        self.scores.shape()[1]
    }

    /// Column means of the scores.
    pub fn mean_scores(&self) -> Result<Vec<f64>> {
        let (n, p) = self.scores.dims2()?;
        if n == 0 {
            return Err(Error::InsufficientData("importance report has no samples".into()));
        }
        let mut mean = vec![0.0; p];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(self.scores.row(r)) {
                *m += v;
            }
        }
        Ok(mean.into_iter().map(|m| m / n as f64).collect())
    }

    pub fn rows(&self) -> Vec<ImportanceRow> {
        (0..self.n_samples())
            .map(|r| ImportanceRow {
                sample_id: r,
                estimator: self.estimator.name().to_string(),
                scores: self.scores.row(r).to_vec(),
                seconds: self.seconds,
                forwards: self.forwards,
                backwards: self.backwards,
            })
            .collect()
    }
}

/// One line of `importance.csv`. `seconds`, `forwards` and `backwards` are
/// totals of the report the row belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceRow {
    pub sample_id: usize,
    pub estimator: String,
    pub scores: Vec<f64>,
    pub seconds: f64,
    pub forwards: usize,
    pub backwards: usize,
}

fn header(p: usize) -> Vec<String> {
    let mut h = vec!["sample_id".to_string(), "estimator".to_string()];
    h.extend((1..=p).map(|i| format!("group_{i}")));
    h.extend(["seconds", "forwards", "backwards"].map(String::from));
    h
}

fn common_width(reports: &[ImportanceReport]) -> Result<usize> {
    let p = reports.first().map_or(0, ImportanceReport::n_groups);
    if reports.iter().any(|r| r.n_groups() != p) {
        return Err(Error::Dimension("reports cover different numbers of groups".into()));
    }
    Ok(p)
}

/// Writes the reports one after the other under a shared header.
pub fn write_importance_csv<W: Write>(reports: &[ImportanceReport], out: W) -> Result<()> {
    let p = common_width(reports)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(p))?;
    for row in reports.iter().flat_map(ImportanceReport::rows) {
        let mut rec = vec![row.sample_id.to_string(), row.estimator];
        rec.extend(row.scores.iter().map(f64::to_string));
        rec.extend([row.seconds.to_string(), row.forwards.to_string(), row.backwards.to_string()]);
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_importance_csv<R: Read>(input: R) -> Result<Vec<ImportanceRow>> {
    let mut r = csv::Reader::from_reader(input);
    let head = r.headers()?.clone();
    let p = head.len().checked_sub(5).ok_or_else(|| Error::Protocol("importance header is too short".into()))?;
    if head.iter().collect::<Vec<_>>() != header(p) {
        return Err(Error::Protocol(format!("unexpected importance header {head:?}")));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Protocol(format!("`{s}` is not a number"))) };
    let int = |s: &str| -> Result<usize> { s.parse().map_err(|_| Error::Protocol(format!("`{s}` is not a count"))) };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(ImportanceRow {
            sample_id: int(&rec[0])?,
            estimator: rec[1].to_string(),
            scores: (0..p).map(|i| num(&rec[2 + i])).collect::<Result<_>>()?,
            seconds: num(&rec[2 + p])?,
            forwards: int(&rec[3 + p])?,
            backwards: int(&rec[4 + p])?,
        });
    }
    Ok(rows)
}

/// JSON array of row objects with the same field names as the CSV columns.
pub fn importance_json(reports: &[ImportanceReport]) -> Result<serde_json::Value> {
    common_width(reports)?;
    let rows = reports
        .iter()
        .flat_map(ImportanceReport::rows)
        .map(|row| {
            let mut obj = serde_json::Map::new();
            obj.insert("sample_id".into(), row.sample_id.into());
            obj.insert("estimator".into(), row.estimator.into());
            for (i, s) in row.scores.iter().enumerate() {
                obj.insert(format!("group_{}", i + 1), (*s).into());
            }
            obj.insert("seconds".into(), row.seconds.into());
            obj.insert("forwards".into(), row.forwards.into());
            obj.insert("backwards".into(), row.backwards.into());
            serde_json::Value::Object(obj)
        })
        .collect();
    Ok(serde_json::Value::Array(rows))
}

fn check_partition(partition: &[Vec<usize>], n_features: usize, x: &Tensor) -> Result<()> {
    validate_partition(partition, n_features)?;
    let (_, d) = x.dims2()?;
    if d != n_features {
        return Err(Error::Dimension(format!("model expects {n_features} features, samples have {d}")));
    }
    Ok(())
}

fn row_chunks(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Attention read-out: one forward pass per batch, no backward passes.
pub fn explain_ame(model: &AmeModel, x: &Tensor, batch_size: usize) -> Result<ImportanceReport> {
    check_partition(model.partition(), model.n_features(), x)?;
    let start = Instant::now();
    let p = model.n_experts();
    let mut forwards = 0;
    let mut data = Vec::with_capacity(x.rows() * p);
    for chunk in row_chunks(x.rows(), batch_size) {
        forwards += 1;
        let (_, attention) = model.predict(&x.select_rows(&chunk)?)?;
        data.extend_from_slice(attention.data());
    }
    let seconds = start.elapsed().as_secs_f64();
    Ok(ImportanceReport {
        estimator: Estimator::Ame,
        model_id: model.model_hash()?,
        scores: Tensor::new(vec![x.rows(), p], data)?,
        degenerate: vec![false; x.rows()],
        seconds,
        forwards,
        backwards: 0,
    })
}

fn finish_report(
    estimator: Estimator,
    model_id: String,
    raw: Vec<Vec<f64>>,
    p: usize,
    start: Instant,
    forwards: usize,
    backwards: usize,
) -> Result<ImportanceReport> {
    let n = raw.len();
    let mut data = Vec::with_capacity(n * p);
    let mut degenerate = Vec::with_capacity(n);
    for r in &raw {
        let (s, flag) = normalize_scores(r);
        data.extend(s);
        degenerate.push(flag);
    }
    Ok(ImportanceReport {
        estimator,
        model_id,
        scores: Tensor::new(vec![n, p], data)?,
        degenerate,
        seconds: start.elapsed().as_secs_f64(),
        forwards,
        backwards,
    })
}

/// Input-gradient saliency: per group, the summed absolute gradient of the
/// prediction (regression) or of the predicted class's log-probability
/// (classification). One forward and one backward pass per batch.
pub fn explain_saliency<M: Predictor + ?Sized>(
    model: &M,
    x: &Tensor,
    partition: &[Vec<usize>],
    batch_size: usize,
) -> Result<ImportanceReport> {
    check_partition(partition, model.n_features(), x)?;
    let start = Instant::now();
    let mut counted = Counted::new(model);
    let mut raw = Vec::with_capacity(x.rows());
    for chunk in row_chunks(x.rows(), batch_size) {
        let grad = counted.input_gradient(&x.select_rows(&chunk)?)?;
        for r in 0..chunk.len() {
            let row = grad.row(r);
            raw.push(partition.iter().map(|grp| grp.iter().map(|&f| row[f].abs()).sum()).collect());
        }
    }
    let (f, b) = (counted.forwards, counted.backwards);
    finish_report(Estimator::Saliency, model.model_id()?, raw, partition.len(), start, f, b)
}

/// How much worse the prediction `masked` is than `orig` for one sample.
fn degradation(task: Task, orig: &[f64], masked: &[f64], target: Option<&[f64]>) -> f64 {
    match task {
        Task::Regression => match target {
            Some(t) => (masked[0] - t[0]).abs() - (orig[0] - t[0]).abs(),
            None => (masked[0] - orig[0]).abs(),
        },
        Task::Classification { .. } => {
            let c = argmax(orig);
            orig[c].max(PROB_FLOOR).ln() - masked[c].max(PROB_FLOOR).ln()
        }
    }
}

/// Occlusion: each group in turn is set to `baseline` and the degradation of
/// the prediction is the group's score (floored at zero). Samples are run
/// one at a time, so every sample costs `p + 1` forward passes. Regression
/// degradation is the increase of absolute error when `targets` are given and
/// the absolute change of the prediction otherwise; classification uses the
/// drop in log-probability of the originally predicted class.
pub fn explain_occlusion<M: Predictor + ?Sized>(
    model: &M,
    x: &Tensor,
    targets: Option<&Tensor>,
    partition: &[Vec<usize>],
    baseline: f64,
) -> Result<ImportanceReport> {
    check_partition(partition, model.n_features(), x)?;
    if let Some(t) = targets {
        if t.rows() != x.rows() {
            return Err(Error::Dimension(format!("{} targets for {} samples", t.rows(), x.rows())));
        }
    }
    let start = Instant::now();
    let task = model.task();
    let mut counted = Counted::new(model);
    let mut raw = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let sample = x.select_rows(&[r])?;
        let orig = counted.forward(&sample)?;
        let target = targets.map(|t| t.row(r));
        let mut scores = Vec::with_capacity(partition.len());
        for group in partition {
            let mut masked = sample.clone();
            for &f in group {
                masked.data_mut()[f] = baseline;
            }
            let pred = counted.forward(&masked)?;
            scores.push(degradation(task, orig.row(0), pred.row(0), target).max(0.0));
        }
        raw.push(scores);
    }
    let (f, b) = (counted.forwards, counted.backwards);
    finish_report(Estimator::Occlusion { baseline }, model.model_id()?, raw, partition.len(), start, f, b)
}

/// Probe networks of the Granger oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Hidden widths; empty gives linear probes.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: vec![16],
            activation: Activation::Relu,
            epochs: 60,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Fits `model` on the mean auxiliary error (absolute error or cross-entropy).
pub fn train_probe(model: &mut MlpModel, data: &Dataset, cfg: &ProbeConfig, seed: u64) -> Result<()> {
    let mut opt = Optimizer::adam(cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let task = model.task();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let batch = data.subset(chunk)?;
            let grads = {
                let mut g = Graph::new();
                let x = g.constant(batch.x);
                let y = g.constant(batch.y);
                let pred = model.forward_graph(&mut g, x)?;
                let err = match task {
                    Task::Regression => g.abs_err_rows(pred, y)?,
                    Task::Classification { .. } => g.cross_entropy_rows(pred, y)?,
                };
                let loss = g.mean(err)?;
                if !g.value(loss).item()?.is_finite() {
                    return Err(Error::Divergence("probe loss is not finite".into()));
                }
                g.backward(loss)?
            };
            let params = model.params_mut();
            params.zero_grads();
            params.accumulate(&grads);
            opt.step(params)?;
            params.clear_grads();
        }
    }
    Ok(())
}

/// Granger targets computed without the AME: `p + 1` probes are trained from
/// raw features (all features, and all but group `i`) on `train`, and their
/// per-sample errors on `heldout` give `Δε` and `Ω`.
pub fn granger_oracle(
    train: &Dataset,
    heldout: &Dataset,
    partition: &[Vec<usize>],
    cfg: &ProbeConfig,
) -> Result<GrangerTargets> {
    let d = train.n_features();
    validate_partition(partition, d)?;
    let p = partition.len();
    if train.len() < 10 * p {
        return Err(Error::InsufficientData(format!(
            "{} training samples are too few for {p} groups (need {})",
            train.len(),
            10 * p
        )));
    }
    if heldout.n_features() != d || heldout.task != train.task {
        return Err(Error::Dimension("held-out data does not match the training data".into()));
    }
    let task = train.task;
    let probe_errors = |features: Vec<usize>, seed: u64| -> Result<Tensor> {
        let mut probe = MlpModel::new(task, d, features, &cfg.hidden, cfg.activation, seed)?;
        train_probe(&mut probe, train, cfg, seed)?;
        error_rows(task, &probe.predict(&heldout.x)?, &heldout.y)
    };
    let eps_all = probe_errors((0..d).collect(), cfg.seed)?;
    let mut excl = Vec::with_capacity(heldout.len() * p);
    let mut cols = Vec::with_capacity(p);
    for (i, group) in partition.iter().enumerate() {
        let rest: Vec<usize> = (0..d).filter(|f| !group.contains(f)).collect();
        cols.push(probe_errors(rest, cfg.seed.wrapping_add(1 + i as u64))?);
    }
    for r in 0..heldout.len() {
        excl.extend(cols.iter().map(|c| c.data()[r]));
    }
    let eps_excl = Tensor::new(vec![heldout.len(), p], excl)?;
    let delta_eps = delta_epsilon(&eps_excl, &eps_all)?;
    let omega = omega_matrix(&delta_eps)?;
    Ok(GrangerTargets {
        eps_excl,
        eps_all,
        delta_eps,
        omega,
    })
}
