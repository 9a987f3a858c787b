//! Define-by-run gradient tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Nodes are appended in
//! evaluation order, so a reverse sweep over the node list is a valid
//! reverse topological order. Most operations work on 2-D `(batch, width)`
//! values; per-row reductions keep the batch axis so that every sample is
//! computed with the same arithmetic whether it is evaluated alone or in a
//! batch.

use std::borrow::Cow;

use super::layers::{Activation, ParamId, ParamStore};
use super::tensor::{axis_layout, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Probability floor inside logarithms of cross-entropy terms.
pub const CE_EPS: f64 = 1e-12;

/// Row sums at or below this are treated as "no positive mass".
pub const NORMALIZE_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Affine { x: Var, w: Var, b: Var },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Ln(Var),
    ConcatCols(Vec<Var>),
    SelectCols { x: Var, cols: Vec<usize> },
    PickPerRow { x: Var, idx: Vec<usize> },
    BroadcastCols { x: Var },
    SumCols(Var),
    Mean(Var),
    WeightedSum { weights: Var, parts: Var, k: usize },
    CrossEntropyRows { probs: Var, targets: Var },
    AbsErrRows { pred: Var, target: Var },
    SqErrRows { pred: Var, target: Var },
    KlRows { target: Var, dist: Var },
    NormalizePositiveRows { x: Var, fallback: Vec<bool> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires gradients
    /// and was reached by the backward sweep.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients, one entry per parameter touched by the graph.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn dim_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{what}: shapes {a:?} and {b:?} are incompatible"))
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input leaf, optionally tracked so its gradient can be read back.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Borrowed parameter leaf. Its gradient is reported in
    /// [`Gradients::params`].
    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a new constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// `x · wᵀ + b` for `x: (B, in)`, `w: (out, in)`, `b: (out)`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x), self.value(w), self.value(b));
        let (batch, inner) = xs.dims2()?;
        let (out, w_in) = ws.dims2()?;
        if w_in != inner || bs.shape() != [out] {
            return Err(Error::Dimension(format!(
                "dense layer expects input (_, {w_in}) and bias ({out}), got input {:?} and bias {:?}",
                xs.shape(),
                bs.shape()
            )));
        }
        let (xd, wd, bd) = (xs.data(), ws.data(), bs.data());
        let mut data = Vec::with_capacity(batch * out);
        for r in 0..batch {
            let row = &xd[r * inner..(r + 1) * inner];
            for o in 0..out {
                let wrow = &wd[o * inner..(o + 1) * inner];
                let mut acc = bd[o];
                for k in 0..inner {
                    acc += row[k] * wrow[k];
                }
                data.push(acc);
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![batch, out], data)?, Op::Affine { x, w, b }, rg))
    }

    /// Matrix product of `(m, n)` and `(n, q)` operands. A 1-D right operand
    /// is treated as a column `(n, 1)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2()?;
        let bshape = self.value(b).shape().to_vec();
        let (bn, q) = match bshape.as_slice() {
            [n2] => (*n2, 1),
            [n2, q] => (*n2, *q),
            _ => return Err(dim_err("matmul", self.value(a).shape(), &bshape)),
        };
        if bn != n {
            return Err(dim_err("matmul", self.value(a).shape(), &bshape));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; m * q];
        for i in 0..m {
            for j in 0..q {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += ad[i * n + k] * bd[k * q + j];
                }
                data[i * q + j] = acc;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, q], data)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, what: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(what, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        let rg = self.rg(&[a]);
        self.push(t, Op::AddScalar(a), rg)
    }

    /// Elementwise activation. `Softmax` normalises along the last axis.
    pub fn activate(&mut self, a: Var, act: Activation) -> Result<Var> {
        let t = match act {
            Activation::Identity => return Ok(a),
            Activation::Tanh => self.value(a).map(f64::tanh),
            Activation::Relu => self.value(a).map(|v| v.max(0.0)),
            Activation::Sigmoid => self.value(a).map(|v| 1.0 / (1.0 + (-v).exp())),
            Activation::Softmax => {
                let last = self.value(a).shape().len().saturating_sub(1);
                return self.softmax(a, last);
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Act(a, act), rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_layout(self.value(x).shape(), axis)?;
        let mut t = self.value(x).clone();
        softmax_in_place(t.data_mut(), outer, len, inner);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Natural logarithm; inputs must be strictly positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(v) = self.value(a).data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain(format!("logarithm of non-positive value {v}")));
        }
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Ln(a), rg))
    }

    /// Concatenates 2-D values with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).dims2()?.0,
            None => return Err(Error::Dimension("concatenation of zero tensors".into())),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(dim_err("concat", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(vec![rows, total], data)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let t = self.value(x).select_cols(cols)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SelectCols { x, cols: cols.to_vec() }, rg))
    }

    /// `(B, k) → (B, 1)` picking column `idx[r]` from row `r`.
    pub fn pick_per_row(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if idx.len() != rows || idx.iter().any(|&i| i >= cols) {
            return Err(Error::Dimension(format!(
                "pick_per_row needs {rows} indices below {cols}"
            )));
        }
        let data = idx.iter().enumerate().map(|(r, &c)| self.value(x).get2(r, c)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, 1], data)?, Op::PickPerRow { x, idx: idx.to_vec() }, rg))
    }

    /// Repeats a `(B, 1)` column `k` times into `(B, k)`.
    pub fn broadcast_cols(&mut self, x: Var, k: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if cols != 1 {
            return Err(Error::Dimension(format!(
                "broadcast_cols expects a column, got {:?}",
                self.value(x).shape()
            )));
        }
        let src = self.value(x).data();
        let data = (0..rows).flat_map(|r| std::iter::repeat_n(src[r], k)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, k], data)?, Op::BroadcastCols { x }, rg))
    }

    /// Row sums, `(B, k) → (B, 1)`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (rows, _) = self.value(x).dims2()?;
        let data = (0..rows).map(|r| self.value(x).row(r).iter().sum()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![rows, 1], data)?, Op::SumCols(x), rg))
    }

    /// Mean over every element, producing a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::Dimension("mean of an empty tensor".into()));
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// `out[r, j] = Σᵢ weights[r, i] · parts[r, i·k + j]` for
    /// `weights: (B, p)` and `parts: (B, p·k)`.
    pub fn weighted_sum(&mut self, weights: Var, parts: Var, k: usize) -> Result<Var> {
        let (rows, p) = self.value(weights).dims2()?;
        let (prow, pcols) = self.value(parts).dims2()?;
        if prow != rows || pcols != p * k {
            return Err(dim_err("weighted_sum", self.value(weights).shape(), self.value(parts).shape()));
        }
        let (w, c) = (self.value(weights), self.value(parts));
        let mut data = vec![0.0; rows * k];
        for r in 0..rows {
            let (wr, cr) = (w.row(r), c.row(r));
            for j in 0..k {
                let mut acc = 0.0;
                for i in 0..p {
                    acc += wr[i] * cr[i * k + j];
                }
                data[r * k + j] = acc;
            }
        }
        let rg = self.rg(&[weights, parts]);
        Ok(self.push(Tensor::new(vec![rows, k], data)?, Op::WeightedSum { weights, parts, k }, rg))
    }

    fn rows_pair(&self, what: &str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(dim_err(what, av.shape(), bv.shape()));
        }
        av.dims2()
    }

    /// Per-row cross-entropy `−Σⱼ tⱼ ln(pⱼ + ε)`, `(B, k) → (B, 1)`.
    pub fn cross_entropy_rows(&mut self, probs: Var, targets: Var) -> Result<Var> {
        let (rows, cols) = self.rows_pair("cross_entropy", probs, targets)?;
        let (p, t) = (self.value(probs).data(), self.value(targets).data());
        if let Some(v) = p.iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain(format!("negative probability {v}")));
        }
        let data = (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|j| -t[r * cols + j] * (p[r * cols + j] + CE_EPS).ln())
                    .sum()
            })
            .collect();
        let rg = self.rg(&[probs, targets]);
        Ok(self.push(Tensor::new(vec![rows, 1], data)?, Op::CrossEntropyRows { probs, targets }, rg))
    }

    /// Per-row mean absolute error, `(B, k) → (B, 1)`.
    pub fn abs_err_rows(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (rows, cols) = self.rows_pair("abs_err", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let data = (0..rows)
            .map(|r| (0..cols).map(|j| (p[r * cols + j] - t[r * cols + j]).abs()).sum::<f64>() / cols as f64)
            .collect();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::new(vec![rows, 1], data)?, Op::AbsErrRows { pred, target }, rg))
    }

    /// Per-row mean squared error, `(B, k) → (B, 1)`.
    pub fn sq_err_rows(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (rows, cols) = self.rows_pair("sq_err", pred, target)?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let data = (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|j| (p[r * cols + j] - t[r * cols + j]).powi(2))
                    .sum::<f64>()
                    / cols as f64
            })
            .collect();
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::new(vec![rows, 1], data)?, Op::SqErrRows { pred, target }, rg))
    }

    /// Per-row `KL(target ‖ dist) = Σⱼ tⱼ ln(tⱼ / dⱼ)` with `0 · ln 0 = 0`.
    /// `dist` entries are floored at `f64::MIN_POSITIVE`.
    pub fn kl_rows(&mut self, target: Var, dist: Var) -> Result<Var> {
        let (rows, cols) = self.rows_pair("kl", target, dist)?;
        let (t, d) = (self.value(target).data(), self.value(dist).data());
        let data = (0..rows)
            .map(|r| {
                (0..cols)
                    .map(|j| {
                        let tj = t[r * cols + j];
                        if tj > 0.0 {
                            tj * (tj.ln() - d[r * cols + j].max(f64::MIN_POSITIVE).ln())
                        } else {
                            0.0
                        }
                    })
                    .sum()
            })
            .collect();
        let rg = self.rg(&[target, dist]);
        Ok(self.push(Tensor::new(vec![rows, 1], data)?, Op::KlRows { target, dist }, rg))
    }

    /// Clamps every entry at zero and rescales each row to sum to one.
    /// Rows without positive mass become uniform and pass no gradient.
    pub fn normalize_positive_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if cols == 0 {
            return Err(Error::Dimension("normalisation over zero columns".into()));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(rows * cols);
        let mut fallback = Vec::with_capacity(rows);
        for r in 0..rows {
            let (row, fb) = normalize_positive(src.row(r));
            data.extend(row);
            fallback.push(fb);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::NormalizePositiveRows { x, fallback },
            rg,
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { nodes: grads, params: Vec::new() });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                match params.iter_mut().find(|(pid, _)| pid == id) {
                    Some((_, acc)) => acc.add_assign(g),
                    None => params.push((*id, g.clone())),
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, inner) = (xv.shape()[0], xv.shape()[1]);
                let out_w = wv.shape()[0];
                if self.requires_grad(*x) {
                    self.accumulate(grads, *x, |dx| {
                        for r in 0..batch {
                            for o in 0..out_w {
                                let go = gd[r * out_w + o];
                                if go == 0.0 {
                                    continue;
                                }
                                let wrow = &wv.data()[o * inner..(o + 1) * inner];
                                let drow = &mut dx[r * inner..(r + 1) * inner];
                                for k in 0..inner {
                                    drow[k] += go * wrow[k];
                                }
                            }
                        }
                    });
                }
                if self.requires_grad(*w) {
                    self.accumulate(grads, *w, |dw| {
                        for r in 0..batch {
                            let xrow = &xv.data()[r * inner..(r + 1) * inner];
                            for o in 0..out_w {
                                let go = gd[r * out_w + o];
                                if go == 0.0 {
                                    continue;
                                }
                                let drow = &mut dw[o * inner..(o + 1) * inner];
                                for k in 0..inner {
                                    drow[k] += go * xrow[k];
                                }
                            }
                        }
                    });
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, |db| {
                        for r in 0..batch {
                            for o in 0..out_w {
                                db[o] += gd[r * out_w + o];
                            }
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (av.shape()[0], av.shape()[1]);
                let q = out.shape()[1];
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, |da| {
                        for i in 0..m {
                            for k in 0..n {
                                let mut acc = 0.0;
                                for j in 0..q {
                                    acc += gd[i * q + j] * bv.data()[k * q + j];
                                }
                                da[i * n + k] += acc;
                            }
                        }
                    });
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, |db| {
                        for k in 0..n {
                            for j in 0..q {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += av.data()[i * n + k] * gd[i * q + j];
                                }
                                db[k * q + j] += acc;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, gd, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, gd, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| axpy(d, gd, 1.0));
                self.accumulate(grads, *b, |d| axpy(d, gd, -1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for j in 0..d.len() {
                        d[j] += gd[j] * bv[j];
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for j in 0..d.len() {
                        d[j] += gd[j] * av[j];
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |d| axpy(d, gd, *c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, |d| axpy(d, gd, 1.0)),
            Op::Act(a, act) => {
                let (x, y) = (self.value(*a).data(), out.data());
                self.accumulate(grads, *a, |d| {
                    for j in 0..d.len() {
                        let deriv = match act {
                            Activation::Tanh => 1.0 - y[j] * y[j],
                            Activation::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Activation::Sigmoid => y[j] * (1.0 - y[j]),
                            Activation::Identity | Activation::Softmax => 1.0,
                        };
                        d[j] += gd[j] * deriv;
                    }
                });
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = out.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                self.accumulate(grads, *x, |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|k| gd[base + k * inner] * y[base + k * inner]).sum();
                            for k in 0..len {
                                let at = base + k * inner;
                                d[at] += y[at] * (gd[at] - dot);
                            }
                        }
                    }
                });
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |d| {
                    for j in 0..d.len() {
                        d[j] += gd[j] / x[j];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (out.shape()[0], out.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    self.accumulate(grads, p, |d| {
                        for r in 0..rows {
                            for c in 0..w {
                                d[r * w + c] += gd[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SelectCols { x, cols } => {
                let width = self.value(*x).shape()[1];
                let rows = out.shape()[0];
                self.accumulate(grads, *x, |d| {
                    for r in 0..rows {
                        for (j, &c) in cols.iter().enumerate() {
                            d[r * width + c] += gd[r * cols.len() + j];
                        }
                    }
                });
            }
            Op::PickPerRow { x, idx } => {
                let width = self.value(*x).shape()[1];
                self.accumulate(grads, *x, |d| {
                    for (r, &c) in idx.iter().enumerate() {
                        d[r * width + c] += gd[r];
                    }
                });
            }
            Op::BroadcastCols { x } => {
                let (rows, k) = (out.shape()[0], out.shape()[1]);
                self.accumulate(grads, *x, |d| {
                    for r in 0..rows {
                        d[r] += gd[r * k..(r + 1) * k].iter().sum::<f64>();
                    }
                });
            }
            Op::SumCols(x) => {
                let (rows, k) = self.value(*x).dims2().expect("2-D");
                self.accumulate(grads, *x, |d| {
                    for r in 0..rows {
                        for c in 0..k {
                            d[r * k + c] += gd[r];
                        }
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, |d| {
                    for v in d.iter_mut() {
                        *v += gd[0] / n;
                    }
                });
            }
            Op::WeightedSum { weights, parts, k } => {
                let k = *k;
                let (w, c) = (self.value(*weights), self.value(*parts));
                let (rows, p) = (w.shape()[0], w.shape()[1]);
                self.accumulate(grads, *weights, |d| {
                    for r in 0..rows {
                        for i in 0..p {
                            let mut acc = 0.0;
                            for j in 0..k {
                                acc += gd[r * k + j] * c.data()[r * p * k + i * k + j];
                            }
                            d[r * p + i] += acc;
                        }
                    }
                });
                self.accumulate(grads, *parts, |d| {
                    for r in 0..rows {
                        for i in 0..p {
                            let wi = w.data()[r * p + i];
                            for j in 0..k {
                                d[r * p * k + i * k + j] += gd[r * k + j] * wi;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropyRows { probs, targets } => {
                let (p, t) = (self.value(*probs).data(), self.value(*targets).data());
                let cols = self.value(*probs).shape()[1];
                self.accumulate(grads, *probs, |d| {
                    for j in 0..d.len() {
                        d[j] -= gd[j / cols] * t[j] / (p[j] + CE_EPS);
                    }
                });
                self.accumulate(grads, *targets, |d| {
                    for j in 0..d.len() {
                        d[j] -= gd[j / cols] * (p[j] + CE_EPS).ln();
                    }
                });
            }
            Op::AbsErrRows { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let cols = self.value(*pred).shape()[1];
                let sign = |j: usize| {
                    let diff = p[j] - t[j];
                    if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.accumulate(grads, *pred, |d| {
                    for j in 0..d.len() {
                        d[j] += gd[j / cols] * sign(j) / cols as f64;
                    }
                });
                self.accumulate(grads, *target, |d| {
                    for j in 0..d.len() {
                        d[j] -= gd[j / cols] * sign(j) / cols as f64;
                    }
                });
            }
            Op::SqErrRows { pred, target } => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let cols = self.value(*pred).shape()[1];
                self.accumulate(grads, *pred, |d| {
                    for j in 0..d.len() {
                        d[j] += gd[j / cols] * 2.0 * (p[j] - t[j]) / cols as f64;
                    }
                });
                self.accumulate(grads, *target, |d| {
                    for j in 0..d.len() {
                        d[j] -= gd[j / cols] * 2.0 * (p[j] - t[j]) / cols as f64;
                    }
                });
            }
            Op::KlRows { target, dist } => {
                let (t, q) = (self.value(*target).data(), self.value(*dist).data());
                let cols = self.value(*target).shape()[1];
                self.accumulate(grads, *dist, |d| {
                    for j in 0..d.len() {
                        d[j] -= gd[j / cols] * t[j] / q[j].max(f64::MIN_POSITIVE);
                    }
                });
                // d/dt of t·ln(t/q) is ln(t/q) + 1; taken as 0 at t = 0.
                self.accumulate(grads, *target, |d| {
                    for j in 0..d.len() {
                        if t[j] > 0.0 {
                            d[j] += gd[j / cols] * (t[j].ln() - q[j].max(f64::MIN_POSITIVE).ln() + 1.0);
                        }
                    }
                });
            }
            Op::NormalizePositiveRows { x, fallback } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.shape()[0], xv.shape()[1]);
                let y = out.data();
                self.accumulate(grads, *x, |d| {
                    for r in 0..rows {
                        if fallback[r] {
                            continue;
                        }
                        let row = xv.row(r);
                        let sum: f64 = row.iter().map(|v| v.max(0.0)).sum();
                        let dot: f64 = (0..cols).map(|j| gd[r * cols + j] * y[r * cols + j]).sum();
                        for j in 0..cols {
                            if row[j] > 0.0 {
                                d[r * cols + j] += (gd[r * cols + j] - dot) / sum;
                            }
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(g.data_mut());
    }
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Clamp-at-zero then normalise. Returns the row and whether the uniform
/// fallback was taken.
pub fn normalize_positive(row: &[f64]) -> (Vec<f64>, bool) {
    let sum: f64 = row.iter().map(|v| v.max(0.0)).sum();
    if sum <= NORMALIZE_FLOOR {
        let u = 1.0 / row.len() as f64;
        (vec![u; row.len()], true)
    } else {
        (row.iter().map(|v| v.max(0.0) / sum).collect(), false)
    }
}
