//! Attentive mixture of experts: experts over disjoint feature groups,
//! per-expert attentive gates and the auxiliary predictors used by the
//! Granger-causal objective.

mod ame;
mod config;
mod io;
mod mlp;

pub use ame::{build_ame, combined_state, importance, AmeGraph, AmeModel, AmeOutput, Expert, Gate};
pub use config::{validate_partition, AmeConfig, Task};
pub(crate) use config::check_alpha;
pub use io::{short_hash, ModelFile, NamedTensor, MODEL_FORMAT};
pub use mlp::MlpModel;
