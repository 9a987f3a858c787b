use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    Softmax,
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors plus their accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Option<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.grads.push(None);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Adds gradients from a backward pass into the stored gradients.
    /// Repeated calls accumulate until [`ParamStore::zero_grads`].
    pub fn accumulate(&mut self, grads: &super::Gradients) {
        for (id, g) in grads.params() {
            match &mut self.grads[id.0] {
                Some(acc) => acc.add_assign(g),
                slot @ None => *slot = Some(g.clone()),
            }
        }
    }

    pub fn set_grad(&mut self, id: ParamId, g: Tensor) {
        self.grads[id.0] = Some(g);
    }

    /// Clears every gradient; parameters without a gradient afterwards
    /// are reported as missing by the optimizer.
    pub fn clear_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Sets every gradient to zeros of the right shape.
    pub fn zero_grads(&mut self) {
        for (g, v) in self.grads.iter_mut().zip(&self.values) {
            *g = Some(Tensor::zeros(v.shape()));
        }
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

/// Glorot-uniform weights, `U(−l, l)` with `l = √(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut impl Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
    let data = (0..fan_out * fan_in).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("shape matches")
}

pub fn standard_normal(rng: &mut impl Rng, len: usize, scale: f64) -> Tensor {
    let data = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::vector(data)
}

/// Fully connected layer: `activation(x · Wᵀ + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseLayer {
    /// Registers a Glorot-initialised layer with zero bias.
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let weights = store.add(format!("{name}.weight"), glorot_uniform(rng, out_dim, in_dim));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        DenseLayer {
            weights,
            bias,
            activation,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Dimension(format!(
                "dense layer expects input (batch, {}), got {:?} (weights {:?})",
                self.in_dim,
                shape,
                store.value(self.weights).shape()
            )));
        }
        let w = g.param(store, self.weights);
        let b = g.param(store, self.bias);
        let z = g.affine(x, w, b)?;
        g.activate(z, self.activation)
    }
}

/// Stack of dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// Hidden layers use `hidden_act`; the last layer uses `out_act`.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        hidden_act: Activation,
        out_act: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for (i, &w) in hidden.iter().enumerate() {
            layers.push(DenseLayer::init(store, &format!("{name}.hidden{i}"), prev, w, hidden_act, rng));
            prev = w;
        }
        layers.push(DenseLayer::init(store, &format!("{name}.out"), prev, out_dim, out_act, rng));
        Mlp { layers }
    }

    pub fn forward<'a>(&self, g: &mut Graph<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(g, store, h))
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer_with(store: &mut ParamStore, w: Tensor, b: Tensor, act: Activation) -> DenseLayer {
        let (out_dim, in_dim) = w.dims2().unwrap();
        DenseLayer {
            weights: store.add("w", w),
            bias: store.add("b", b),
            activation: act,
            in_dim,
            out_dim,
        }
    }

    #[test]
    fn identity_weights_pass_input_through() {
        let mut store = ParamStore::new();
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let layer = layer_with(&mut store, w, Tensor::zeros(&[2]), Activation::Identity);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn tanh_of_zero_weights_is_zero() {
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, Tensor::zeros(&[3, 2]), Tensor::zeros(&[3]), Activation::Tanh);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![4.0, -9.0], vec![0.1, 2.0]]).unwrap());
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_hand_evaluation() {
        // [[1, 1]] · [2, 3] + 0.5 = 5.5
        let mut store = ParamStore::new();
        let w = Tensor::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let layer = layer_with(&mut store, w, Tensor::vector(vec![0.5]), Activation::Identity);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![2.0, 3.0]]).unwrap());
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[5.5]);
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, Tensor::zeros(&[1, 2]), Tensor::zeros(&[1]), Activation::Identity);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        let err = layer.forward(&mut g, &store, x).unwrap_err().to_string();
        assert!(err.contains("[1, 3]") && err.contains("[1, 2]"), "{err}");
    }

    #[test]
    fn glorot_is_seeded_and_bounded() {
        let a = glorot_uniform(&mut ChaCha8Rng::seed_from_u64(7), 4, 6);
        let b = glorot_uniform(&mut ChaCha8Rng::seed_from_u64(7), 4, 6);
        assert_eq!(a, b);
        let limit = (6.0f64 / 10.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn zero_input_width_layer_emits_bias() {
        let mut store = ParamStore::new();
        let layer = layer_with(
            &mut store,
            Tensor::zeros(&[2, 0]),
            Tensor::vector(vec![0.25, -1.0]),
            Activation::Relu,
        );
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 0]));
        let y = layer.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, 0.0, 0.25, 0.0, 0.25, 0.0]);
    }
}
