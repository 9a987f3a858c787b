//! Reverse-mode differentiation substrate: tensors, the gradient tape,
//! dense layers, losses and optimizers.

mod graph;
mod layers;
mod loss;
mod optim;
mod tensor;

pub use graph::{normalize_positive, Gradients, Graph, Var, CE_EPS, NORMALIZE_FLOOR};
pub use layers::{glorot_uniform, standard_normal, Activation, DenseLayer, Mlp, ParamId, ParamStore};
pub use loss::{loss_cross_entropy, loss_mae, loss_mse};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tensor::{softmax, Tensor};
