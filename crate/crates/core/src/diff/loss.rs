//! Batch losses built from the per-row graph primitives.

use super::graph::{Graph, Var};
use crate::error::Result;

/// Mean of `|y_pred − y_true|` over all elements.
pub fn loss_mae(g: &mut Graph<'_>, y_pred: Var, y_true: Var) -> Result<Var> {
    let rows = g.abs_err_rows(y_pred, y_true)?;
    g.mean(rows)
}

pub fn loss_mse(g: &mut Graph<'_>, y_pred: Var, y_true: Var) -> Result<Var> {
    let rows = g.sq_err_rows(y_pred, y_true)?;
    g.mean(rows)
}

/// Batch mean of `−Σ target · ln(prob + 1e-12)`.
pub fn loss_cross_entropy(g: &mut Graph<'_>, probs: Var, targets: Var) -> Result<Var> {
    let rows = g.cross_entropy_rows(probs, targets)?;
    g.mean(rows)
}
