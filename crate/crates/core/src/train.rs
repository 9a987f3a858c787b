//! Minibatch training of AMEs on the blended objective, with early stopping
//! on the validation objective.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diff::{Graph, Optimizer};
use crate::error::{Error, Result};
use crate::granger::{blend, build_objective};
use crate::model::AmeModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Minimum decrease of the validation blend that counts as improvement.
    pub min_delta: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 100,
            batch_size: 32,
            patience: 12,
            min_delta: 0.0,
        }
    }
}

/// Sample-weighted means over an epoch or an evaluation pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub main_loss: f64,
    pub mge: f64,
    pub aux_loss_mean: f64,
}

impl EpochMetrics {
    /// The two-term blended loss `(1 − α)·main + α·mge`.
    pub fn blended(&self, alpha: f64) -> f64 {
        blend(self.main_loss, self.mge, 0.0, alpha, 0.0).unwrap_or(f64::NAN)
    }
}

/// One row of `training_log.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub split: String,
    pub main_loss: f64,
    pub mge: f64,
    pub aux_loss_mean: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    pub log: Vec<LogRow>,
}

#[derive(Default)]
struct Accum {
    n: usize,
    main: f64,
    mge: f64,
    aux: f64,
}

impl Accum {
    fn add(&mut self, n: usize, main: f64, mge: f64, aux: f64) {
        self.n += n;
        self.main += main * n as f64;
        self.mge += mge * n as f64;
        self.aux += aux * n as f64;
    }

    fn finish(self) -> EpochMetrics {
        let n = self.n as f64;
        EpochMetrics {
            main_loss: self.main / n,
            mge: self.mge / n,
            aux_loss_mean: self.aux / n,
        }
    }
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("{what} became {v}")))
    }
}

/// One pass of shuffled minibatch updates on the total loss.
pub fn train_epoch(
    model: &mut AmeModel,
    data: &Dataset,
    opt: &mut Optimizer,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut acc = Accum::default();
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = data.subset(chunk)?;
        let (grads, main, mge, aux, total) = {
            let mut g = Graph::new();
            let x = g.constant(batch.x);
            let y = g.constant(batch.y);
            let fwd = model.forward_graph(&mut g, x, true)?;
            let obj = build_objective(model, &mut g, &fwd, y, None)?;
            let total = g.value(obj.total).item()?;
            (g.backward(obj.total)?, obj.main_value, obj.mge_value, obj.aux_mean_value, total)
        };
        check_finite(total, "training loss")?;
        let params = model.params_mut();
        params.zero_grads();
        params.accumulate(&grads);
        opt.step(params)?;
        params.clear_grads();
        acc.add(chunk.len(), main, mge, aux);
    }
    Ok(acc.finish())
}

/// Loss terms over a dataset without updating the model.
pub fn evaluate(model: &AmeModel, data: &Dataset, batch_size: usize) -> Result<EpochMetrics> {
    if data.is_empty() {
        return Err(Error::InsufficientData("evaluation set is empty".into()));
    }
    let mut acc = Accum::default();
    let rows: Vec<usize> = (0..data.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let batch = data.subset(chunk)?;
        let mut g = Graph::new();
        let x = g.constant(batch.x);
        let y = g.constant(batch.y);
        let fwd = model.forward_graph(&mut g, x, true)?;
        let obj = build_objective(model, &mut g, &fwd, y, None)?;
        acc.add(chunk.len(), obj.main_value, obj.mge_value, obj.aux_mean_value);
    }
    Ok(acc.finish())
}

fn shuffle_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

/// Trains for up to `settings.epochs` epochs. With a validation set, stops
/// after `patience` epochs without improvement of the validation blend and
/// restores the best parameters.
pub fn fit(model: &mut AmeModel, train: &Dataset, val: Option<&Dataset>, settings: &TrainSettings) -> Result<FitReport> {
    let alpha = model.config().alpha;
    let mut opt = Optimizer::new(model.config().optimizer.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(model.config().seed));
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, crate::diff::ParamStore)> = None;
    let mut epochs_run = 0;
    let mut stopped_early = false;

    for epoch in 1..=settings.epochs {
        let m = train_epoch(model, train, &mut opt, settings.batch_size, &mut rng)?;
        epochs_run = epoch;
        log.push(row(epoch, "train", &m, alpha));
        let Some(val) = val else { continue };
        let v = evaluate(model, val, settings.batch_size.max(256))?;
        log.push(row(epoch, "val", &v, alpha));
        let score = v.blended(alpha);
        check_finite(score, "validation loss")?;
        match &best {
            Some((_, b, _)) if score > *b - settings.min_delta => {
                let since = epoch - best.as_ref().map_or(0, |(e, _, _)| *e);
                if since >= settings.patience {
                    stopped_early = true;
                    break;
                }
            }
            _ => best = Some((epoch, score, model.params().clone())),
        }
    }

    let (best_epoch, best_val) = match best {
        Some((e, s, params)) => {
            *model.params_mut() = params;
            (e, s)
        }
        None => (epochs_run, f64::NAN),
    };
    Ok(FitReport {
        epochs_run,
        best_epoch,
        best_val,
        stopped_early,
        log,
    })
}

fn row(epoch: usize, split: &str, m: &EpochMetrics, alpha: f64) -> LogRow {
    LogRow {
        epoch,
        split: split.to_string(),
        main_loss: m.main_loss,
        mge: m.mge,
        aux_loss_mean: m.aux_loss_mean,
        alpha,
    }
}
