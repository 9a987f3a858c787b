//! Central finite-difference check of every parameter gradient of the
//! training objective.

use crate::diff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::granger::build_objective;
use crate::model::AmeModel;

/// Smallest denominator of the relative error, so that gradients that are
/// zero up to rounding are compared absolutely.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    /// The entry with the largest relative error.
    pub worst: Option<Mismatch>,
}

impl GradCheck {
    pub fn max_rel_err(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |m| m.rel_err)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Value of the total loss; `frozen` replaces the Granger targets.
fn total(model: &AmeModel, x: &Tensor, y: &Tensor, frozen: Option<&Tensor>) -> Result<f64> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let fwd = model.forward_graph(&mut g, xv, true)?;
    let obj = build_objective(model, &mut g, &fwd, yv, frozen)?;
    g.value(obj.total).item()
}

/// Compares the analytic gradient of the total loss with central differences
/// of step `h`. With detached targets the targets are held at their value
/// for the unperturbed parameters, which is the function the analytic
/// gradient differentiates. Models that stop auxiliary gradients at the
/// experts are rejected, since no finite difference sees that cut.
pub fn check_total_loss(model: &AmeModel, x: &Tensor, y: &Tensor, h: f64) -> Result<GradCheck> {
    if !model.config().aux_grads_to_experts {
        return Err(Error::Config("finite differences cannot follow aux_grads_to_experts = false".into()));
    }
    let (analytic, frozen) = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let fwd = model.forward_graph(&mut g, xv, true)?;
        let obj = build_objective(model, &mut g, &fwd, yv, None)?;
        let frozen = model.config().detach_targets.then(|| obj.omega.clone());
        (g.backward(obj.total)?, frozen)
    };
    let mut store = model.params().clone();
    store.zero_grads();
    store.accumulate(&analytic);

    let mut probe = model.clone();
    let mut checked = 0;
    let mut worst: Option<Mismatch> = None;
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let grad = store.grad(id).expect("zeroed above").clone();
        for i in 0..grad.len() {
            let orig = probe.params().value(id).data()[i];
            probe.params_mut().value_mut(id).data_mut()[i] = orig + h;
            let up = total(&probe, x, y, frozen.as_ref())?;
            probe.params_mut().value_mut(id).data_mut()[i] = orig - h;
            let down = total(&probe, x, y, frozen.as_ref())?;
            probe.params_mut().value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.data()[i];
            let e = rel_err(analytic, numeric);
            checked += 1;
            if worst.as_ref().is_none_or(|w| e > w.rel_err) {
                worst = Some(Mismatch {
                    param: model.params().name(id).to_string(),
                    index: i,
                    analytic,
                    numeric,
                    rel_err: e,
                });
            }
        }
    }
    Ok(GradCheck { checked, worst })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_ame, AmeConfig, Task};

    #[test]
    fn small_regression_model_passes() {
        let model = build_ame(AmeConfig {
            n_features: 2,
            expert_hidden: vec![2],
            gate_hidden: 2,
            aux_hidden: vec![3],
            alpha: 0.5,
            seed: 4,
            task: Task::Regression,
            ..AmeConfig::default()
        })
        .unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -1.2], vec![1.1, 0.4]]).unwrap();
        let y = Tensor::from_rows(&[vec![0.7], vec![-0.2]]).unwrap();
        let r = check_total_loss(&model, &x, &y, 1e-5).unwrap();
        assert_eq!(r.checked, model.params().numel());
        assert!(r.max_rel_err() < 1e-4, "{:?}", r.worst);
    }

    #[test]
    fn rel_err_uses_floor() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert_eq!(rel_err(2.0, 1.0), 0.5);
        assert!((rel_err(0.0, 1e-10) - 1e-2).abs() < 1e-15);
    }
}
