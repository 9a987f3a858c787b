//! Plain feed-forward predictor, used as a non-attentive baseline and as the
//! probe network of the independent Granger oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::Task;
use crate::diff::{Activation, Graph, Mlp, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// MLP reading the columns `features` of a `(B, n_features)` input.
#[derive(Clone, Debug)]
pub struct MlpModel {
    task: Task,
    n_features: usize,
    features: Vec<usize>,
    params: ParamStore,
    net: Mlp,
}

impl MlpModel {
    /// An empty `hidden` gives a linear (or softmax-linear) model.
    pub fn new(
        task: Task,
        n_features: usize,
        features: Vec<usize>,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        if let Some(&f) = features.iter().find(|&&f| f >= n_features) {
            return Err(Error::Config(format!("feature {f} out of range for {n_features} inputs")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let net = Mlp::init(
            &mut params,
            "mlp",
            features.len(),
            hidden,
            task.output_dim(),
            activation,
            task.head(),
            &mut rng,
        );
        Ok(MlpModel {
            task,
            n_features,
            features,
            params,
            net,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn features(&self) -> &[usize] {
        &self.features
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.n_features {
            return Err(Error::Dimension(format!(
                "model expects input (batch, {}), got {shape:?}",
                self.n_features
            )));
        }
        let xs = g.select_cols(x, &self.features)?;
        self.net.forward(g, &self.params, xs)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = self.forward_graph(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}
