use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::diff::{Activation, OptimizerConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { classes: usize },
}

impl Task {
    /// Width of a prediction, contribution or auxiliary output.
    pub fn output_dim(self) -> usize {
        match self {
            Task::Regression => 1,
            Task::Classification { classes } => classes,
        }
    }

    pub fn is_classification(self) -> bool {
        matches!(self, Task::Classification { .. })
    }

    pub(crate) fn head(self) -> Activation {
        match self {
            Task::Regression => Activation::Identity,
            Task::Classification { .. } => Activation::Softmax,
        }
    }
}

/// Architecture and training description of an attentive mixture of experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AmeConfig {
    /// Total input width.
    pub n_features: usize,
    /// One feature-index set per expert (0-based). Empty means one group
    /// per feature.
    pub feature_partition: Vec<Vec<usize>>,
    /// Hidden widths of every expert; the last one is the exposed `h_i`.
    pub expert_hidden: Vec<usize>,
    pub expert_activation: Activation,
    /// Width of the gate projection `u_i` and context vector `u_{s,i}`.
    pub gate_hidden: usize,
    pub aux_hidden: Vec<usize>,
    pub task: Task,
    pub alpha: f64,
    /// Weight of the mean auxiliary-predictor loss in the optimised objective.
    pub aux_weight: f64,
    /// Treat the Granger targets as constants when differentiating the MGE.
    pub detach_targets: bool,
    /// Let auxiliary losses back-propagate into the experts.
    pub aux_grads_to_experts: bool,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for AmeConfig {
    fn default() -> Self {
        AmeConfig {
            n_features: 0,
            feature_partition: Vec::new(),
            expert_hidden: vec![8],
            expert_activation: Activation::Tanh,
            gate_hidden: 8,
            aux_hidden: vec![16],
            task: Task::Regression,
            alpha: 0.1,
            aux_weight: 1.0,
            detach_targets: true,
            aux_grads_to_experts: true,
            seed: 0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl AmeConfig {
    /// Partition with one singleton group per feature when none is given.
    pub fn resolved_partition(&self) -> Vec<Vec<usize>> {
        if self.feature_partition.is_empty() {
            (0..self.n_features).map(|i| vec![i]).collect()
        } else {
            self.feature_partition.clone()
        }
    }

    pub fn n_experts(&self) -> usize {
        self.resolved_partition().len()
    }

    pub fn validate(&self) -> Result<()> {
        validate_partition(&self.resolved_partition(), self.n_features)?;
        if self.expert_hidden.is_empty() || self.expert_hidden.contains(&0) {
            return Err(Error::Config("expert_hidden needs at least one non-zero width".into()));
        }
        if self.gate_hidden == 0 || self.aux_hidden.contains(&0) {
            return Err(Error::Config("layer widths must be at least 1".into()));
        }
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return Err(Error::Config(format!("classification needs ≥ 2 classes, got {classes}")));
            }
        }
        check_alpha(self.alpha)?;
        if !(self.aux_weight >= 0.0 && self.aux_weight.is_finite()) {
            return Err(Error::Config(format!("aux_weight must be non-negative, got {}", self.aux_weight)));
        }
        Ok(())
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")))
    }
}

/// Checks that the groups are non-empty, pairwise disjoint and cover
/// `0..n_features` exactly.
pub fn validate_partition(groups: &[Vec<usize>], n_features: usize) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::Config("feature partition needs at least one group".into()));
    }
    if let Some(i) = groups.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("feature group {i} is empty")));
    }
    let mut seen = BTreeSet::new();
    let mut overlap = BTreeSet::new();
    let mut out_of_range = BTreeSet::new();
    for &f in groups.iter().flatten() {
        if f >= n_features {
            out_of_range.insert(f);
        } else if !seen.insert(f) {
            overlap.insert(f);
        }
    }
    let missing: Vec<usize> = (0..n_features).filter(|f| !seen.contains(f)).collect();
    let mut problems = Vec::new();
    if !overlap.is_empty() {
        problems.push(format!("overlapping feature indices {:?}", overlap.into_iter().collect::<Vec<_>>()));
    }
    if !out_of_range.is_empty() {
        problems.push(format!(
            "indices {:?} exceed {n_features} features",
            out_of_range.into_iter().collect::<Vec<_>>()
        ));
    }
    if !missing.is_empty() {
        problems.push(format!("feature indices {missing:?} are not assigned to any group"));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(problems.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_is_reported_by_index() {
        let err = validate_partition(&[vec![0, 1], vec![1, 2]], 3).unwrap_err().to_string();
        assert!(err.contains("overlapping feature indices [1]"), "{err}");
    }

    #[test]
    fn missing_and_out_of_range_indices() {
        let err = validate_partition(&[vec![0], vec![3]], 3).unwrap_err().to_string();
        assert!(err.contains("[3] exceed"), "{err}");
        assert!(err.contains("[1, 2] are not assigned"), "{err}");
    }

    #[test]
    fn default_partition_is_one_group_per_feature() {
        let cfg = AmeConfig { n_features: 3, ..AmeConfig::default() };
        assert_eq!(cfg.resolved_partition(), vec![vec![0], vec![1], vec![2]]);
        cfg.validate().unwrap();
    }

    #[test]
    fn alpha_range_checked() {
        let cfg = AmeConfig { n_features: 1, alpha: 1.5, ..AmeConfig::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = serde_json::from_str::<AmeConfig>(r#"{"n_features": 2, "alpah": 0.1}"#);
        assert!(err.is_err());
    }
}
