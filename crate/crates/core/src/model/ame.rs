use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AmeConfig, Task};
use crate::diff::{standard_normal, Activation, DenseLayer, Graph, Mlp, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

/// Expert `E_i`: an MLP over one feature group exposing its top hidden
/// state `h_i` and its contribution `c_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    pub features: Vec<usize>,
    pub hidden: Vec<DenseLayer>,
    pub contribution: DenseLayer,
}

/// Attentive gating network `G_i`: a tanh projection of `h_all` scored
/// against a learned context vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub projection: DenseLayer,
    pub context: ParamId,
}

#[derive(Clone, Debug)]
pub struct AmeModel {
    config: AmeConfig,
    partition: Vec<Vec<usize>>,
    params: ParamStore,
    experts: Vec<Expert>,
    gates: Vec<Gate>,
    aux_excl: Vec<Mlp>,
    aux_all: Mlp,
}

/// Graph handles of one forward pass, kept for building losses.
#[derive(Clone, Debug)]
pub struct AmeGraph {
    pub hidden: Vec<Var>,
    pub contributions: Vec<Var>,
    pub h_all: Var,
    pub logits: Var,
    pub attention: Var,
    pub mixed: Var,
    pub y: Var,
    pub aux_excl: Vec<Var>,
    pub aux_all: Option<Var>,
}

/// Values of a forward pass over a batch of `B` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct AmeOutput {
    /// Output width `k` (1 for regression, classes otherwise).
    pub k: usize,
    /// `(B, k)` predictions after the task head.
    pub y: Tensor,
    /// `(B, k)` attention-weighted sum before the task head.
    pub mixed: Tensor,
    /// `(B, p)` attention factors.
    pub attention: Tensor,
    /// `(B, p·k)` expert contributions, expert-major.
    pub contributions: Tensor,
    /// `(B, Σ(|h_i| + k))` combined hidden state.
    pub h_all: Tensor,
    /// `(B, p·k)` predictions of the expert-excluding auxiliary predictors.
    pub aux_excl: Tensor,
    /// `(B, k)` prediction of the all-experts auxiliary predictor.
    pub aux_all: Tensor,
}

impl AmeOutput {
    pub fn batch_size(&self) -> usize {
        self.attention.rows()
    }

    pub fn n_experts(&self) -> usize {
        self.attention.shape()[1]
    }

    pub fn contribution(&self, sample: usize, expert: usize) -> &[f64] {
        &self.contributions.row(sample)[expert * self.k..(expert + 1) * self.k]
    }

    /// The single-sample output for row `r`.
    pub fn sample(&self, r: usize) -> AmeOutput {
        let pick = |t: &Tensor| t.select_rows(&[r]).expect("row in range");
        AmeOutput {
            k: self.k,
            y: pick(&self.y),
            mixed: pick(&self.mixed),
            attention: pick(&self.attention),
            contributions: pick(&self.contributions),
            h_all: pick(&self.h_all),
            aux_excl: pick(&self.aux_excl),
            aux_all: pick(&self.aux_all),
        }
    }
}

/// The AME importance read-out: the attention factors themselves.
pub fn importance(output: &AmeOutput) -> &Tensor {
    &output.attention
}

/// `concatenate(h_1, c_1, …, h_p, c_p)` for per-expert `(B, ·)` values.
pub fn combined_state(hidden: &[Tensor], contributions: &[Tensor]) -> Result<Tensor> {
    if hidden.len() != contributions.len() || hidden.is_empty() {
        return Err(Error::Dimension(format!(
            "combined state needs matching non-empty lists, got {} hidden states and {} contributions",
            hidden.len(),
            contributions.len()
        )));
    }
    let mut g = Graph::new();
    let parts: Vec<Var> = hidden
        .iter()
        .zip(contributions)
        .flat_map(|(h, c)| [h.clone(), c.clone()])
        .map(|t| g.constant(t))
        .collect();
    let all = g.concat_cols(&parts)?;
    Ok(g.value(all).clone())
}

/// Builds and initialises a model. Experts, gates and auxiliary predictors
/// draw from one seeded stream in a fixed order.
pub fn build_ame(config: AmeConfig) -> Result<AmeModel> {
    config.validate()?;
    let partition = config.resolved_partition();
    let p = partition.len();
    let k = config.task.output_dim();
    let h = *config.expert_hidden.last().expect("validated");
    let h_all_dim = p * (h + k);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamStore::new();

    let experts = partition
        .iter()
        .enumerate()
        .map(|(i, features)| {
            let mut prev = features.len();
            let hidden = config
                .expert_hidden
                .iter()
                .enumerate()
                .map(|(l, &w)| {
                    let layer = DenseLayer::init(
                        &mut params,
                        &format!("expert{i}.hidden{l}"),
                        prev,
                        w,
                        config.expert_activation,
                        &mut rng,
                    );
                    prev = w;
                    layer
                })
                .collect();
            let contribution =
                DenseLayer::init(&mut params, &format!("expert{i}.contribution"), prev, k, Activation::Identity, &mut rng);
            Expert {
                features: features.clone(),
                hidden,
                contribution,
            }
        })
        .collect();

    let ctx_scale = 1.0 / (config.gate_hidden as f64).sqrt();
    let gates = (0..p)
        .map(|i| {
            let projection = DenseLayer::init(
                &mut params,
                &format!("gate{i}.projection"),
                h_all_dim,
                config.gate_hidden,
                Activation::Tanh,
                &mut rng,
            );
            let context = params.add(
                format!("gate{i}.context"),
                standard_normal(&mut rng, config.gate_hidden, ctx_scale),
            );
            Gate { projection, context }
        })
        .collect();

    let head = config.task.head();
    let aux_excl = (0..p)
        .map(|i| {
            Mlp::init(
                &mut params,
                &format!("aux_excl{i}"),
                h_all_dim - (h + k),
                &config.aux_hidden,
                k,
                Activation::Relu,
                head,
                &mut rng,
            )
        })
        .collect();
    let aux_all = Mlp::init(&mut params, "aux_all", h_all_dim, &config.aux_hidden, k, Activation::Relu, head, &mut rng);

    Ok(AmeModel {
        config,
        partition,
        params,
        experts,
        gates,
        aux_excl,
        aux_all,
    })
}

impl AmeModel {
    pub fn config(&self) -> &AmeConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn partition(&self) -> &[Vec<usize>] {
        &self.partition
    }

    pub fn n_experts(&self) -> usize {
        self.partition.len()
    }

    pub fn n_features(&self) -> usize {
        self.config.n_features
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn aux_excl(&self) -> &[Mlp] {
        &self.aux_excl
    }

    pub fn aux_all(&self) -> &Mlp {
        &self.aux_all
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 2 || shape[1] != self.config.n_features {
            return Err(Error::Dimension(format!(
                "model expects input (batch, {}), got {shape:?}",
                self.config.n_features
            )));
        }
        Ok(())
    }

    /// Records the full forward pass on `g`. Auxiliary predictors are only
    /// evaluated when `with_aux` is set.
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a>, x: Var, with_aux: bool) -> Result<AmeGraph> {
        self.check_input(g.value(x).shape())?;
        let store = &self.params;
        let mut hidden = Vec::with_capacity(self.experts.len());
        let mut contributions = Vec::with_capacity(self.experts.len());
        for expert in &self.experts {
            let xi = g.select_cols(x, &expert.features)?;
            let h = expert.hidden.iter().try_fold(xi, |v, layer| layer.forward(g, store, v))?;
            let c = expert.contribution.forward(g, store, h)?;
            hidden.push(h);
            contributions.push(c);
        }
        let interleaved: Vec<Var> = hidden.iter().zip(&contributions).flat_map(|(&h, &c)| [h, c]).collect();
        let h_all = g.concat_cols(&interleaved)?;
        let logits = self.gate_logits(g, h_all)?;
        let attention = g.softmax(logits, 1)?;
        let stacked = g.concat_cols(&contributions)?;
        let mixed = g.weighted_sum(attention, stacked, self.config.task.output_dim())?;
        let y = g.activate(mixed, self.config.task.head())?;

        let (aux_excl, aux_all) = if with_aux {
            let (aux_excl, aux_all) = self.aux_forward(g, &hidden, &contributions, h_all)?;
            (aux_excl, Some(aux_all))
        } else {
            (Vec::new(), None)
        };
        Ok(AmeGraph {
            hidden,
            contributions,
            h_all,
            logits,
            attention,
            mixed,
            y,
            aux_excl,
            aux_all,
        })
    }

    fn gate_logits<'a>(&'a self, g: &mut Graph<'a>, h_all: Var) -> Result<Var> {
        let logits = self
            .gates
            .iter()
            .map(|gate| {
                let u = gate.projection.forward(g, &self.params, h_all)?;
                let ctx = g.param(&self.params, gate.context);
                g.matmul(u, ctx)
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat_cols(&logits)
    }

    fn aux_forward<'a>(
        &'a self,
        g: &mut Graph<'a>,
        hidden: &[Var],
        contributions: &[Var],
        h_all: Var,
    ) -> Result<(Vec<Var>, Var)> {
        let detach = !self.config.aux_grads_to_experts;
        let mut parts = Vec::with_capacity(2 * hidden.len());
        for (&h, &c) in hidden.iter().zip(contributions) {
            if detach {
                parts.push((g.detach(h), g.detach(c)));
            } else {
                parts.push((h, c));
            }
        }
        let batch = g.value(h_all).rows();
        let mut aux_excl = Vec::with_capacity(hidden.len());
        for (i, mlp) in self.aux_excl.iter().enumerate() {
            let rest: Vec<Var> = parts
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .flat_map(|(_, &(h, c))| [h, c])
                .collect();
            let input = if rest.is_empty() {
                g.constant(Tensor::zeros(&[batch, 0]))
            } else {
                g.concat_cols(&rest)?
            };
            aux_excl.push(mlp.forward(g, &self.params, input)?);
        }
        let all_input = if detach { g.detach(h_all) } else { h_all };
        let aux_all = self.aux_all.forward(g, &self.params, all_input)?;
        Ok((aux_excl, aux_all))
    }

    /// Full forward pass including auxiliary predictors.
    pub fn forward(&self, x: &Tensor) -> Result<AmeOutput> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fwd = self.forward_graph(&mut g, xv, true)?;
        Ok(self.collect_output(&g, &fwd))
    }

    pub(crate) fn collect_output(&self, g: &Graph<'_>, fwd: &AmeGraph) -> AmeOutput {
        let k = self.config.task.output_dim();
        let batch = g.value(fwd.attention).rows();
        let cat = |vars: &[Var]| -> Tensor {
            let mut data = Vec::with_capacity(batch * vars.len() * k);
            for r in 0..batch {
                for &v in vars {
                    data.extend_from_slice(g.value(v).row(r));
                }
            }
            Tensor::new(vec![batch, vars.len() * k], data).expect("consistent widths")
        };
        AmeOutput {
            k,
            y: g.value(fwd.y).clone(),
            mixed: g.value(fwd.mixed).clone(),
            attention: g.value(fwd.attention).clone(),
            contributions: cat(&fwd.contributions),
            h_all: g.value(fwd.h_all).clone(),
            aux_excl: cat(&fwd.aux_excl),
            aux_all: fwd.aux_all.map_or_else(|| Tensor::zeros(&[batch, 0]), |v| g.value(v).clone()),
        }
    }

    /// Predictions and attention only; the auxiliary predictors are skipped.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fwd = self.forward_graph(&mut g, xv, false)?;
        Ok((g.value(fwd.y).clone(), g.value(fwd.attention).clone()))
    }

    /// Attention factors for a given combined hidden state `(B, |h_all|)`.
    pub fn attention(&self, h_all: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let hv = g.constant(h_all.clone());
        let logits = self.gate_logits(&mut g, hv)?;
        let a = g.softmax(logits, 1)?;
        Ok(g.value(a).clone())
    }
}
