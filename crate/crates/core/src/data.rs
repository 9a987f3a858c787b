//! Datasets and the seeded synthetic generators with known informative
//! features.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::model::Task;

/// Inputs `(n, d)` and targets `(n, k)`; classification targets are one-hot.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Tensor,
    pub task: Task,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor, task: Task) -> Result<Self> {
        let (n, _) = x.dims2()?;
        let (ny, k) = y.dims2()?;
        if n != ny || k != task.output_dim() {
            return Err(Error::Dimension(format!(
                "inputs {:?} and targets {:?} do not fit task {task:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(Dataset { x, y, task })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn subset(&self, rows: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            x: self.x.select_rows(rows)?,
            y: self.y.select_rows(rows)?,
            task: self.task,
        })
    }

    pub fn head(&self, n: usize) -> Result<Dataset> {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows)
    }

    /// Class index of every row (argmax of the one-hot target).
    pub fn labels(&self) -> Vec<usize> {
        (0..self.len()).map(|r| argmax(self.y.row(r))).collect()
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    AdditiveRegression,
    InformativeSubsetClassification,
    NoiseControl,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Tanh,
}

impl Link {
    fn apply(self, v: f64) -> f64 {
        match self {
            Link::Identity => v,
            Link::Tanh => v.tanh(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Class 1 iff the noisy logit is positive.
    Threshold,
    /// Class 1 with probability `sigmoid(logit)`.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Informative {
    pub index: usize,
    pub weight: f64,
}

/// Description of a synthetic task with ground-truth informative features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_features: usize,
    pub informative: Vec<Informative>,
    pub link: Link,
    /// Standard deviation of Gaussian noise added to the target (or logit).
    pub noise: f64,
    pub labels: LabelMode,
    /// Task of the noise control; its targets never depend on the inputs.
    pub control_task: Task,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            kind: SyntheticKind::InformativeSubsetClassification,
            n_features: 8,
            informative: [(1, 2.0), (3, -1.5), (4, 1.25), (6, -1.0)]
                .into_iter()
                .map(|(index, weight)| Informative { index, weight })
                .collect(),
            link: Link::Identity,
            noise: 0.5,
            labels: LabelMode::Threshold,
            control_task: Task::Classification { classes: 2 },
            n_train: 2000,
            n_val: 500,
            n_test: 500,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn task(&self) -> Task {
        match self.kind {
            SyntheticKind::AdditiveRegression => Task::Regression,
            SyntheticKind::InformativeSubsetClassification => Task::Classification { classes: 2 },
            SyntheticKind::NoiseControl => self.control_task,
        }
    }

    /// Indices of the informative features (empty for the noise control).
    pub fn informative_set(&self) -> Vec<usize> {
        match self.kind {
            SyntheticKind::NoiseControl => Vec::new(),
            _ => {
                let mut s: Vec<usize> = self.informative.iter().map(|i| i.index).collect();
                s.sort_unstable();
                s
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_features == 0 {
            return Err(Error::Config("synthetic data needs at least one feature".into()));
        }
        if self.kind != SyntheticKind::NoiseControl {
            if self.informative.is_empty() {
                return Err(Error::Config("informative set must be non-empty".into()));
            }
            if self.informative.len() > self.n_features {
                return Err(Error::Config(format!(
                    "{} informative features exceed {} total features",
                    self.informative.len(),
                    self.n_features
                )));
            }
            let mut seen = vec![false; self.n_features];
            for inf in &self.informative {
                if inf.index >= self.n_features {
                    return Err(Error::Config(format!("informative index {} out of range", inf.index)));
                }
                if std::mem::replace(&mut seen[inf.index], true) {
                    return Err(Error::Config(format!("informative index {} repeated", inf.index)));
                }
                if !inf.weight.is_finite() {
                    return Err(Error::Config(format!("weight of feature {} is not finite", inf.index)));
                }
            }
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if let Task::Classification { classes } = self.task() {
            if classes != 2 && self.kind != SyntheticKind::NoiseControl {
                return Err(Error::Config("synthetic classification is binary".into()));
            }
            if classes < 2 {
                return Err(Error::Config("classification needs at least 2 classes".into()));
            }
        }
        Ok(())
    }
}

/// Generates train/validation/test splits from one seeded stream; the splits
/// are consecutive index ranges, so they never share a sample.
pub fn generate(spec: &SyntheticSpec) -> Result<Splits> {
    spec.validate()?;
    let n = spec.n_train + spec.n_val + spec.n_test;
    let task = spec.task();
    let k = task.output_dim();
    let d = spec.n_features;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps: f64 = StandardNormal.sample(&mut rng);
        // The noise control ignores the informative set, which may not fit.
        let signal = || -> f64 {
            spec.informative.iter().map(|inf| inf.weight * spec.link.apply(row[inf.index])).sum()
        };
        match spec.kind {
            SyntheticKind::AdditiveRegression => ys.push(signal() + spec.noise * eps),
            SyntheticKind::InformativeSubsetClassification => {
                let logit = signal() + spec.noise * eps;
                let positive = match spec.labels {
                    LabelMode::Threshold => logit > 0.0,
                    LabelMode::Sample => rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp()),
                };
                ys.extend(one_hot(usize::from(positive), 2));
            }
            SyntheticKind::NoiseControl => match task {
                Task::Regression => ys.push(eps),
                Task::Classification { classes } => ys.extend(one_hot(rng.random_range(0..classes), classes)),
            },
        }
        xs.extend(row);
    }
    let x = Tensor::new(vec![n, d], xs)?;
    let y = Tensor::new(vec![n, k], ys)?;
    let all = Dataset::new(x, y, task)?;
    let range = |a: usize, b: usize| (a..b).collect::<Vec<_>>();
    let (a, b) = (spec.n_train, spec.n_train + spec.n_val);
    Ok(Splits {
        train: all.subset(&range(0, a))?,
        val: all.subset(&range(a, b))?,
        test: all.subset(&range(b, n))?,
    })
}

/// Reads a CSV file with a header row: every column but the last is a
/// feature, the last is the target (a number for regression, a class index
/// for classification).
pub fn load_csv(path: &std::path::Path, task: Task) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let width = reader.headers()?.len();
    if width < 2 {
        return Err(Error::Config(format!("{} needs at least one feature and a target column", path.display())));
    }
    let k = task.output_dim();
    let (mut xs, mut ys, mut n) = (Vec::new(), Vec::new(), 0);
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|_| {
                Error::Config(format!("{}: row {}: `{s}` is not a number", path.display(), line + 1))
            })
        };
        for field in rec.iter().take(width - 1) {
            xs.push(parse(field)?);
        }
        let target = parse(&rec[width - 1])?;
        match task {
            Task::Regression => ys.push(target),
            Task::Classification { classes } => {
                if target < 0.0 || target.fract() != 0.0 || target as usize >= classes {
                    return Err(Error::Config(format!(
                        "{}: row {}: label {target} is not a class index below {classes}",
                        path.display(),
                        line + 1
                    )));
                }
                ys.extend(one_hot(target as usize, classes));
            }
        }
        n += 1;
    }
    Dataset::new(Tensor::new(vec![n, width - 1], xs)?, Tensor::new(vec![n, k], ys)?, task)
}

/// Shifts and scales every feature to zero mean and unit variance using the
/// training split's statistics; constant features are only centred.
pub fn standardize(splits: &mut Splits) -> Result<()> {
    let (n, d) = splits.train.x.dims2()?;
    if n == 0 {
        return Err(Error::InsufficientData("cannot standardize an empty training split".into()));
    }
    let mut mu = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mu.iter_mut().zip(splits.train.x.row(r)) {
            *m += v / n as f64;
        }
    }
    for r in 0..n {
        for (j, v) in splits.train.x.row(r).iter().enumerate() {
            var[j] += (v - mu[j]).powi(2) / n as f64;
        }
    }
    let scale: Vec<f64> = var.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    for ds in [&mut splits.train, &mut splits.val, &mut splits.test] {
        if ds.n_features() != d {
            return Err(Error::Dimension(format!("splits have {d} and {} features", ds.n_features())));
        }
        for (i, v) in ds.x.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - mu[j]) / scale[j];
        }
    }
    Ok(())
}

fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}
