use serde::{Deserialize, Serialize};

use super::layers::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// SGD or Adam over every parameter in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        if !(config.learning_rate > 0.0 && config.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                config.learning_rate
            )));
        }
        Ok(Optimizer {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            ..OptimizerConfig::default()
        })
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            ..OptimizerConfig::default()
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Applies one update from the stored gradients. Every parameter must
    /// carry a gradient; the caller clears them afterwards.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if let Some(id) = params.ids().find(|&id| params.grad(id).is_none()) {
            return Err(Error::MissingGrad(params.name(id).to_string()));
        }
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for id in params.ids().collect::<Vec<_>>() {
                    let g = params.grad(id).expect("checked").clone();
                    for (w, gv) in params.value_mut(id).data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() != params.len() {
                    self.first = params.ids().map(|id| Tensor::zeros(params.value(id).shape())).collect();
                    self.second = self.first.clone();
                }
                self.step += 1;
                let OptimizerConfig { beta1, beta2, epsilon, .. } = self.config;
                let c1 = 1.0 - beta1.powi(self.step as i32);
                let c2 = 1.0 - beta2.powi(self.step as i32);
                for id in params.ids().collect::<Vec<_>>() {
                    let g = params.grad(id).expect("checked").clone();
                    let m = self.first[id.index()].data_mut();
                    let v = self.second[id.index()].data_mut();
                    let w = params.value_mut(id).data_mut();
                    for j in 0..w.len() {
                        let gj = g.data()[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        w[j] -= lr * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
        Ok(())
    }
}
