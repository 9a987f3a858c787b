//! Granger-causal objective.
//!
//! The auxiliary predictors estimate, per sample, the error made without
//! expert `i` (`ε_{X\i}`) and with every expert (`ε_X`). Their difference
//! `Δε_i` is clamped at zero and normalised into a target distribution `Ω`,
//! and the attention distribution `A` is pulled towards it with
//! `KL(Ω ‖ A)`. The optimised objective blends that mean Granger-causal
//! error (MGE) with the main loss via `α`, plus a `β`-weighted term that
//! trains the auxiliary predictors themselves.

use crate::diff::{normalize_positive, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{check_alpha, AmeGraph, AmeModel, AmeOutput, Task};

/// Per-sample Granger quantities for a batch of `B` samples and `p` experts.
#[derive(Clone, Debug, PartialEq)]
pub struct GrangerTargets {
    /// `(B, p)` errors of the expert-excluding auxiliary predictors.
    pub eps_excl: Tensor,
    /// `(B, 1)` errors of the all-experts auxiliary predictor.
    pub eps_all: Tensor,
    /// `(B, p)`, `eps_excl − eps_all`.
    pub delta_eps: Tensor,
    /// `(B, p)` target distributions, one per row.
    pub omega: Tensor,
}

/// Per-sample auxiliary loss: mean absolute error for regression,
/// cross-entropy for classification.
fn aux_error_rows(g: &mut Graph<'_>, task: Task, pred: Var, target: Var) -> Result<Var> {
    match task {
        Task::Regression => g.abs_err_rows(pred, target),
        Task::Classification { .. } => g.cross_entropy_rows(pred, target),
    }
}

/// Per-sample auxiliary errors `(eps_excl: (B, p), eps_all: (B, 1))`.
pub fn aux_errors(output: &AmeOutput, y_true: &Tensor, task: Task) -> Result<(Tensor, Tensor)> {
    let k = output.k;
    let p = output.n_experts();
    if y_true.shape() != output.aux_all.shape() {
        return Err(Error::Dimension(format!(
            "targets {:?} do not match auxiliary predictions {:?}",
            y_true.shape(),
            output.aux_all.shape()
        )));
    }
    let mut g = Graph::new();
    let target = g.constant(y_true.clone());
    let all = g.constant(output.aux_all.clone());
    let eps_all = aux_error_rows(&mut g, task, all, target)?;
    let mut cols = Vec::with_capacity(p);
    for i in 0..p {
        let cols_i: Vec<usize> = (i * k..(i + 1) * k).collect();
        let excl = g.constant(output.aux_excl.select_cols(&cols_i)?);
        cols.push(aux_error_rows(&mut g, task, excl, target)?);
    }
    let eps_excl = g.concat_cols(&cols)?;
    Ok((g.value(eps_excl).clone(), g.value(eps_all).clone()))
}

/// Per-sample errors `(B, 1)` of predictions `pred` against `target`, using
/// the same error measure as the auxiliary predictors.
pub fn error_rows(task: Task, pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let e = aux_error_rows(&mut g, task, p, t)?;
    Ok(g.value(e).clone())
}

/// `Δε_i = ε_{X\i} − ε_X` row by row.
pub fn delta_epsilon(eps_excl: &Tensor, eps_all: &Tensor) -> Result<Tensor> {
    let (rows, p) = eps_excl.dims2()?;
    if eps_all.shape() != [rows, 1] {
        return Err(Error::Dimension(format!(
            "eps_all {:?} does not match eps_excl {:?}",
            eps_all.shape(),
            eps_excl.shape()
        )));
    }
    let data = (0..rows)
        .flat_map(|r| {
            let all = eps_all.data()[r];
            eps_excl.row(r).iter().map(move |e| e - all)
        })
        .collect();
    Tensor::new(vec![rows, p], data)
}

/// Target distribution for one sample: negative `Δε` entries are clamped to
/// zero before normalising; no positive mass gives the uniform distribution.
pub fn omega_targets(delta_eps: &[f64]) -> Vec<f64> {
    normalize_positive(delta_eps).0
}

/// Row-wise [`omega_targets`].
pub fn omega_matrix(delta_eps: &Tensor) -> Result<Tensor> {
    let (rows, p) = delta_eps.dims2()?;
    let data = (0..rows).flat_map(|r| omega_targets(delta_eps.row(r))).collect();
    Tensor::new(vec![rows, p], data)
}

pub fn granger_targets(output: &AmeOutput, y_true: &Tensor, task: Task) -> Result<GrangerTargets> {
    let (eps_excl, eps_all) = aux_errors(output, y_true, task)?;
    let delta_eps = delta_epsilon(&eps_excl, &eps_all)?;
    let omega = omega_matrix(&delta_eps)?;
    Ok(GrangerTargets {
        eps_excl,
        eps_all,
        delta_eps,
        omega,
    })
}

/// `KL(Ω ‖ A) = Σ ω_i ln(ω_i / a_i)` with `0 · ln(0 / a) = 0`.
pub fn kl_divergence(omega: &[f64], a: &[f64]) -> Result<f64> {
    if omega.len() != a.len() {
        return Err(Error::Dimension(format!(
            "distributions of length {} and {} cannot be compared",
            omega.len(),
            a.len()
        )));
    }
    let mut kl = 0.0;
    for (&w, &q) in omega.iter().zip(a) {
        if w > 0.0 {
            if q <= 0.0 {
                return Err(Error::Domain(format!(
                    "reference probability {q} where the target has mass {w}"
                )));
            }
            kl += w * (w.ln() - q.ln());
        }
    }
    Ok(kl)
}

/// Mean per-row KL between target and attention matrices.
pub fn mge(omega: &Tensor, attention: &Tensor) -> Result<f64> {
    let (rows, _) = omega.dims2()?;
    if rows == 0 {
        return Err(Error::InsufficientData("MGE over an empty batch".into()));
    }
    if omega.shape() != attention.shape() {
        return Err(Error::Dimension(format!(
            "targets {:?} and attention {:?} differ in shape",
            omega.shape(),
            attention.shape()
        )));
    }
    let mut total = 0.0;
    for r in 0..rows {
        total += kl_divergence(omega.row(r), attention.row(r))?;
    }
    Ok(total / rows as f64)
}

/// Differentiable batch MGE. Gradients reach `omega` only if it is tracked.
pub fn mge_loss(g: &mut Graph<'_>, omega: Var, attention: Var) -> Result<Var> {
    if g.value(omega).rows() == 0 {
        return Err(Error::InsufficientData("MGE over an empty batch".into()));
    }
    let kl = g.kl_rows(omega, attention)?;
    g.mean(kl)
}

/// `(1 − α)·main + α·mge + β·mean(aux)`. `mge` may be omitted when `α = 0`.
pub fn total_loss(
    g: &mut Graph<'_>,
    main: Var,
    mge: Option<Var>,
    aux_losses: &[Var],
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    check_alpha(alpha)?;
    if beta.is_nan() || beta < 0.0 {
        return Err(Error::Config(format!("aux weight must be non-negative, got {beta}")));
    }
    let mut loss = g.scale(main, 1.0 - alpha);
    if alpha > 0.0 {
        let mge = mge.ok_or_else(|| Error::Config("α > 0 requires the MGE term".into()))?;
        let weighted = g.scale(mge, alpha);
        loss = g.add(loss, weighted)?;
    }
    if beta > 0.0 && !aux_losses.is_empty() {
        let mut acc = aux_losses[0];
        for &a in &aux_losses[1..] {
            acc = g.add(acc, a)?;
        }
        let weighted = g.scale(acc, beta / aux_losses.len() as f64);
        loss = g.add(loss, weighted)?;
    }
    Ok(loss)
}

/// Value form of [`total_loss`].
pub fn blend(main: f64, mge: f64, aux_mean: f64, alpha: f64, beta: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok((1.0 - alpha) * main + alpha * mge + beta * aux_mean)
}

/// Graph handles and values of the training objective for one batch.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub main: Var,
    /// Present when the MGE is part of the optimised loss (`α > 0`).
    pub mge: Option<Var>,
    pub aux_losses: Vec<Var>,
    pub omega: Tensor,
    pub main_value: f64,
    pub mge_value: f64,
    pub aux_mean_value: f64,
}

/// Main loss: squared error for regression, cross-entropy for classification.
pub fn main_loss(g: &mut Graph<'_>, task: Task, y: Var, target: Var) -> Result<Var> {
    let rows = match task {
        Task::Regression => g.sq_err_rows(y, target)?,
        Task::Classification { .. } => g.cross_entropy_rows(y, target)?,
    };
    g.mean(rows)
}

/// Records the full objective on top of a forward pass built with
/// auxiliary predictors. `frozen_omega` replaces the targets computed from
/// the current auxiliary predictions (used by finite-difference checks).
pub fn build_objective<'a>(
    model: &'a AmeModel,
    g: &mut Graph<'a>,
    fwd: &AmeGraph,
    target: Var,
    frozen_omega: Option<&Tensor>,
) -> Result<Objective> {
    let cfg = model.config();
    let task = cfg.task;
    let aux_all = fwd
        .aux_all
        .ok_or_else(|| Error::Config("objective needs a forward pass with auxiliary predictors".into()))?;

    let main = main_loss(g, task, fwd.y, target)?;

    let eps_all = aux_error_rows(g, task, aux_all, target)?;
    let mut eps_cols = Vec::with_capacity(fwd.aux_excl.len());
    let mut aux_losses = Vec::with_capacity(fwd.aux_excl.len() + 1);
    for &pred in &fwd.aux_excl {
        let e = aux_error_rows(g, task, pred, target)?;
        aux_losses.push(g.mean(e)?);
        eps_cols.push(e);
    }
    aux_losses.push(g.mean(eps_all)?);

    let p = eps_cols.len();
    let omega = match frozen_omega {
        Some(t) => g.constant(t.clone()),
        None => {
            let eps_excl = g.concat_cols(&eps_cols)?;
            let all_wide = g.broadcast_cols(eps_all, p)?;
            let delta = g.sub(eps_excl, all_wide)?;
            let omega = g.normalize_positive_rows(delta)?;
            if cfg.detach_targets {
                g.detach(omega)
            } else {
                omega
            }
        }
    };
    let omega_value = g.value(omega).clone();

    let (mge_var, mge_value) = if cfg.alpha > 0.0 {
        let m = mge_loss(g, omega, fwd.attention)?;
        (Some(m), g.value(m).item()?)
    } else {
        (None, mge(&omega_value, g.value(fwd.attention))?)
    };

    let total = total_loss(g, main, mge_var, &aux_losses, cfg.alpha, cfg.aux_weight)?;
    let aux_mean_value =
        aux_losses.iter().map(|&v| g.value(v).data()[0]).sum::<f64>() / aux_losses.len() as f64;
    Ok(Objective {
        total,
        main,
        mge: mge_var,
        main_value: g.value(main).item()?,
        aux_losses,
        omega: omega_value,
        mge_value,
        aux_mean_value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ame, AmeConfig};

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v.to_vec()]).unwrap()
    }

    fn fake_output(k: usize, aux_excl: Vec<f64>, aux_all: Vec<f64>) -> AmeOutput {
        let p = aux_excl.len() / k;
        AmeOutput {
            k,
            y: Tensor::zeros(&[1, k]),
            mixed: Tensor::zeros(&[1, k]),
            attention: Tensor::full(&[1, p], 1.0 / p as f64),
            contributions: Tensor::zeros(&[1, p * k]),
            h_all: Tensor::zeros(&[1, 0]),
            aux_excl: row(&aux_excl),
            aux_all: row(&aux_all),
        }
    }

    #[test]
    fn perfect_all_predictor_has_zero_error() {
        let out = fake_output(1, vec![0.5, 2.0], vec![1.5]);
        let (excl, all) = aux_errors(&out, &row(&[1.5]), Task::Regression).unwrap();
        assert_eq!(all.data(), &[0.0]);
        assert_eq!(excl.data(), &[1.0, 0.5]);
    }

    #[test]
    fn perfect_excluded_predictors_give_non_positive_delta() {
        let out = fake_output(1, vec![1.5, 1.5], vec![1.0]);
        let (excl, all) = aux_errors(&out, &row(&[1.5]), Task::Regression).unwrap();
        assert_eq!(excl.data(), &[0.0, 0.0]);
        let d = delta_epsilon(&excl, &all).unwrap();
        assert_eq!(d.data(), &[-0.5, -0.5]);
    }

    #[test]
    fn uniform_classification_error_is_ln_k() {
        let out = fake_output(3, vec![1.0 / 3.0; 3], vec![1.0 / 3.0; 3]);
        let (_, all) = aux_errors(&out, &row(&[0.0, 0.0, 1.0]), Task::Classification { classes: 3 }).unwrap();
        assert!((all.data()[0] - 3f64.ln()).abs() < 1e-10);
    }

    #[test]
    fn delta_epsilon_cases() {
        let d = delta_epsilon(&row(&[0.5, 0.3]), &row(&[0.2])).unwrap();
        assert!((d.data()[0] - 0.3).abs() < 1e-15 && (d.data()[1] - 0.1).abs() < 1e-15);
        let d = delta_epsilon(&row(&[0.2, 0.1]), &row(&[0.2])).unwrap();
        assert_eq!(d.data()[0], 0.0);
        assert!(d.data()[1] < 0.0);
    }

    #[test]
    fn omega_cases() {
        assert_eq!(omega_targets(&[0.2, 0.2]), vec![0.5, 0.5]);
        let w = omega_targets(&[-0.1, 0.3, 0.1]);
        for (a, b) in w.iter().zip([0.0, 0.75, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(omega_targets(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        // 0.5·ln(0.5/0.9) + 0.5·ln(0.5/0.1) = 0.5·ln(25/9) = 0.510825623765990...
        let kl = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((kl - 0.510_825_623_765_990_7).abs() < 1e-12);
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(matches!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), Err(Error::Domain(_))));
    }

    #[test]
    fn mge_is_mean_of_sample_kls() {
        let omega = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(mge(&omega, &omega).unwrap(), 0.0);
        // Choose rows whose KLs are 0.2 and 0.4 exactly is awkward; compare to the
        // mean of independently computed KLs instead.
        let a = Tensor::from_rows(&[vec![0.6, 0.4], vec![0.8, 0.2]]).unwrap();
        let k0 = kl_divergence(omega.row(0), a.row(0)).unwrap();
        let k1 = kl_divergence(omega.row(1), a.row(1)).unwrap();
        assert!((mge(&omega, &a).unwrap() - (k0 + k1) / 2.0).abs() < 1e-15);
        assert!(mge(&Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2])).is_err());
    }

    #[test]
    fn total_loss_blend() {
        let eval = |alpha: f64, beta: f64| {
            let mut g = Graph::new();
            let main = g.constant(Tensor::scalar(0.4));
            let m = g.constant(Tensor::scalar(0.2));
            let aux = [g.constant(Tensor::scalar(1.0)), g.constant(Tensor::scalar(3.0))];
            total_loss(&mut g, main, Some(m), &aux, alpha, beta).map(|v| g.value(v).data()[0])
        };
        assert!((eval(0.0, 0.0).unwrap() - 0.4).abs() < 1e-15);
        assert!((eval(1.0, 0.0).unwrap() - 0.2).abs() < 1e-15);
        assert!((eval(0.5, 0.0).unwrap() - 0.3).abs() < 1e-15);
        assert!((eval(0.5, 1.0).unwrap() - 2.3).abs() < 1e-15);
        assert!(matches!(eval(1.5, 0.0), Err(Error::Config(_))));
        assert!(matches!(eval(-0.1, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn detached_targets_give_aux_zero_mge_gradient() {
        let model = build_ame(AmeConfig {
            n_features: 3,
            task: Task::Classification { classes: 2 },
            alpha: 1.0,
            aux_weight: 0.0,
            seed: 5,
            ..AmeConfig::default()
        })
        .unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.1, 0.4, -0.7]]).unwrap();
        let y = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let yv = g.constant(y);
        let fwd = model.forward_graph(&mut g, xv, true).unwrap();
        let obj = build_objective(&model, &mut g, &fwd, yv, None).unwrap();
        let grads = g.backward(obj.total).unwrap();
        for (id, grad) in grads.params() {
            if model.params().name(*id).starts_with("aux") {
                assert!(grad.data().iter().all(|&v| v == 0.0), "{}", model.params().name(*id));
            }
        }
        // Gate parameters do receive gradient.
        assert!(grads
            .params()
            .iter()
            .any(|(id, g)| model.params().name(*id).starts_with("gate") && g.data().iter().any(|&v| v != 0.0)));
    }
}
