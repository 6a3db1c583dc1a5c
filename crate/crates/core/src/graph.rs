//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order. [`Graph::backward`] walks the tape in reverse from a scalar loss and
//! adds `∂loss/∂value` into the gradient of every [`Parameter`] that was
//! pulled into the graph with [`Graph::param`].
//!
//! [`Parameter`]: crate::params::Parameter

use crate::attention::{self, AttentionFunction, AttentionWeights};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamSet};
use crate::rng::RandomSource;
use crate::tensor::{self, gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Frame-to-clip pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Max,
}

/// Placement of one sequence inside row-stacked attention inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Number of leading key rows that are real frames.
    pub k_valid: usize,
}

/// Placement of one clip's frames inside a row-stacked frame matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RowSegment {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

struct HeadCache {
    weights: Vec<f64>,
    denom: Vec<f64>,
    dropout: Option<Vec<f64>>,
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxRows(NodeId),
    NormalizedSigmoidRows(NodeId, Vec<f64>),
    LayerNorm {
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout(NodeId, Vec<f64>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Sum(NodeId),
    Mean(NodeId),
    Pool {
        x: NodeId,
        segments: Vec<RowSegment>,
        method: Pooling,
        argmax: Vec<usize>,
    },
    Bce {
        probs: NodeId,
        labels: Tensor,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<AttentionSegment>,
        func: AttentionFunction,
        cache: Vec<HeadCache>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Lower clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward pass with respect to a node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite() || !matches!(op, Op::Constant | Op::Param(_)));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Trainable leaf backed by a parameter of `params`.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        self.push(params.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.matrix_dims() != y.matrix_dims() {
            return Err(Error::dim(format!("add of {:?} and {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a length-`c` vector to every row of an `r × c` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(Error::dim(format!("bias of {:?} for rows of width {c}", bv.shape())));
        }
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(format!("mul of {:?} and {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = tensor::relu(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = tensor::sigmoid(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let value = tensor::softmax_rows(self.value(x))?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    pub fn normalized_sigmoid_rows(&mut self, x: NodeId, epsilon: f64) -> Result<NodeId> {
        let value = tensor::normalized_sigmoid_rows(self.value(x), epsilon)?;
        let xv = self.value(x);
        let c = xv.cols();
        let denom = xv
            .data()
            .chunks(c)
            .map(|row| row.iter().map(|v| tensor::sigmoid_scalar(*v)).sum::<f64>() + epsilon)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::NormalizedSigmoidRows(x, denom), rg))
    }

    /// Layer normalization over the last axis with per-feature scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = xv.matrix_dims();
        let (g, b) = (self.value(scale), self.value(shift));
        if g.len() != c || b.len() != c {
            return Err(Error::dim(format!(
                "layer norm over width {c} with scale {:?} and shift {:?}",
                g.shape(),
                b.shape()
            )));
        }
        let mut normalized = xv.data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &mut normalized[i * c..(i + 1) * c];
            let (mean, inv) = tensor::row_moments(row);
            inv_std.push(inv);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv;
                out[i * c + j] = *v * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        let rg = self.rg(&[x, scale, shift]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Inverted dropout. Without a random source (inference) or at rate 0 this
    /// returns `x` itself.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: Option<&mut RandomSource>) -> Result<NodeId> {
        check_rate(rate)?;
        let Some(rng) = rng else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), rate, rng);
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(xv.shape(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout(x, mask), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concatenation of zero tensors"));
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let r = self.value(parts[0]).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != r) {
            return Err(Error::dim(format!(
                "concat of {r}-row and {:?} tensors",
                self.value(*bad).shape()
            )));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let value = Tensor::new(&[r, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let c = self.value(x).cols();
        if len == 0 || start + len > c {
            return Err(Error::dim(format!("columns {start}..{} of width {c}", start + len)));
        }
        let value = self.value(x).slice_cols(start, len);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let value = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(value, Op::Mean(x), rg)
    }

    /// Pools the valid rows of each segment into one output row.
    pub fn pool(&mut self, x: NodeId, segments: Vec<RowSegment>, method: Pooling) -> Result<NodeId> {
        let xv = self.value(x);
        let (r, c) = xv.matrix_dims();
        let mut out = vec![0.0; segments.len() * c];
        let mut argmax = Vec::new();
        for (s, seg) in segments.iter().enumerate() {
            if seg.valid == 0 || seg.valid > seg.len || seg.start + seg.len > r {
                return Err(Error::contract(format!(
                    "pooling segment {s} has {} valid of {} rows at {} (matrix has {r})",
                    seg.valid, seg.len, seg.start
                )));
            }
            let dst = &mut out[s * c..(s + 1) * c];
            match method {
                Pooling::Mean => {
                    for i in seg.start..seg.start + seg.valid {
                        dst.iter_mut().zip(xv.row(i)).for_each(|(d, v)| *d += v);
                    }
                    let n = seg.valid as f64;
                    dst.iter_mut().for_each(|d| *d /= n);
                }
                Pooling::Max => {
                    for j in 0..c {
                        let mut best = seg.start;
                        for i in seg.start + 1..seg.start + seg.valid {
                            if xv.at(i, j) > xv.at(best, j) {
                                best = i;
                            }
                        }
                        dst[j] = xv.at(best, j);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new(&[segments.len(), c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Pool {
                x,
                segments,
                method,
                argmax,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy between probabilities and {0,1} labels.
    pub fn bce(&mut self, probs: NodeId, labels: Tensor) -> Result<NodeId> {
        let p = self.value(probs);
        if p.shape() != labels.shape() {
            return Err(Error::dim(format!(
                "bce of {:?} probabilities and {:?} labels",
                p.shape(),
                labels.shape()
            )));
        }
        if let Some(bad) = labels.data().iter().find(|y| **y != 0.0 && **y != 1.0) {
            return Err(Error::data(format!("label {bad} is not 0 or 1")));
        }
        let total: f64 = p
            .data()
            .iter()
            .zip(labels.data())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let value = Tensor::scalar(total / p.len() as f64);
        let rg = self.rg(&[probs]);
        Ok(self.push(value, Op::Bce { probs, labels }, rg))
    }

    /// Multi-head attention core over row-stacked sequences.
    ///
    /// `q`, `k`, `v` hold the already projected queries, keys and values with
    /// heads side by side along columns. Returns the concatenated per-head
    /// weighted sums and, per segment, the weights before dropout.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<AttentionSegment>,
        func: AttentionFunction,
        dropout: f64,
        mut rng: Option<&mut RandomSource>,
    ) -> Result<(NodeId, Vec<AttentionWeights>)> {
        func.validate()?;
        check_rate(dropout)?;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq_total, qw) = qv.matrix_dims();
        let (nk_total, kw) = kv.matrix_dims();
        let (nv_total, vw) = vv.matrix_dims();
        if heads == 0 || qw % heads != 0 || vw % heads != 0 {
            return Err(Error::dim(format!(
                "{heads} heads over query width {qw} and value width {vw}"
            )));
        }
        if qw != kw {
            return Err(Error::dim(format!("query width {qw} differs from key width {kw}")));
        }
        if nk_total != nv_total {
            return Err(Error::dim(format!("{nk_total} keys but {nv_total} values")));
        }
        let (dk, dv) = (qw / heads, vw / heads);
        let mut out = vec![0.0; nq_total * vw];
        let mut cache = Vec::with_capacity(segments.len() * heads);
        let mut traces = Vec::with_capacity(segments.len());
        for seg in &segments {
            if seg.k_valid == 0 {
                return Err(Error::contract("attention over an all-masked key set"));
            }
            if seg.k_valid > seg.k_len || seg.q_start + seg.q_len > nq_total || seg.k_start + seg.k_len > nk_total {
                return Err(Error::dim(format!("attention segment {seg:?} out of range")));
            }
            let (nq, nk) = (seg.q_len, seg.k_len);
            let mut trace = Vec::with_capacity(heads * nq * nk);
            for h in 0..heads {
                let qh = block(qv, seg.q_start, nq, h * dk, dk);
                let kh = block(kv, seg.k_start, nk, h * dk, dk);
                let vh = block(vv, seg.k_start, nk, h * dv, dv);
                let mut w = vec![0.0; nq * nk];
                let mut denom = vec![0.0; nq];
                attention::attention_weights_into(&qh, &kh, nq, nk, dk, seg.k_valid, func, &mut w, &mut denom);
                trace.extend_from_slice(&w);
                let mask = match rng.as_deref_mut() {
                    Some(r) if dropout > 0.0 => Some(dropout_mask(nq * nk, dropout, r)),
                    _ => None,
                };
                let mut wd = w.clone();
                if let Some(m) = &mask {
                    wd.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
                }
                let mut a = vec![0.0; nq * dv];
                gemm(nq, nk, dv, &wd, false, &vh, false, &mut a, 0.0);
                for i in 0..nq {
                    let dst = (seg.q_start + i) * vw + h * dv;
                    out[dst..dst + dv].copy_from_slice(&a[i * dv..(i + 1) * dv]);
                }
                cache.push(HeadCache {
                    weights: w,
                    denom,
                    dropout: mask,
                });
            }
            traces.push(AttentionWeights {
                weights: Tensor::new(&[heads, nq, nk], trace)?,
            });
        }
        let value = Tensor::new(&[nq_total, vw], out)?;
        let rg = self.rg(&[q, k, v]);
        let id = self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                func,
                cache,
            },
            rg,
        );
        Ok((id, traces))
    }

    /// Propagates gradients from the scalar `loss` and adds them into the
    /// parameter gradients of `params`. Parameter gradients are not reset.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::new(self.value(loss).shape(), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, params);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(contribution.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &Tensor, params: &mut ParamSet) {
        let node = &self.nodes[i];
        let shape = node.value.shape().to_vec();
        let mut out: Vec<(NodeId, Tensor)> = Vec::new();
        match &node.op {
            Op::Constant => {}
            Op::Param(pid) => {
                let p = params.get_mut(*pid);
                p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = av.matrix_dims();
                let n = bv.cols();
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, bv.data(), true, &mut da, 0.0);
                    out.push((*a, Tensor::new(av.shape(), da).expect("shape")));
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, av.data(), true, g.data(), false, &mut db, 0.0);
                    out.push((*b, Tensor::new(bv.shape(), db).expect("shape")));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, reshape_like(g, &self.nodes[a.0].value)));
                out.push((*b, reshape_like(g, &self.nodes[b.0].value)));
            }
            Op::AddBias(x, b) => {
                out.push((*x, g.clone()));
                if self.needs(*b) {
                    let bv = &self.nodes[b.0].value;
                    let c = bv.len();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    out.push((*b, Tensor::new(bv.shape(), db).expect("shape")));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                out.push((*a, zip_with(g, bv, |d, y| d * y)));
                out.push((*b, zip_with(g, av, |d, x| d * x)));
            }
            Op::Scale(x, s) => out.push((*x, g.map(|d| d * s))),
            Op::Relu(x) => out.push((*x, zip_with(g, &node.value, |d, y| if y > 0.0 { d } else { 0.0 }))),
            Op::Sigmoid(x) => out.push((*x, zip_with(g, &node.value, |d, y| d * y * (1.0 - y)))),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = g.clone();
                for (dr, yr) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    dr.iter_mut().zip(yr).for_each(|(d, &w)| *d = w * (*d - dot));
                }
                out.push((*x, dx));
            }
            Op::NormalizedSigmoidRows(x, denom) => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = g.clone();
                for ((dr, yr), &d) in dx.data_mut().chunks_mut(c).zip(y.data().chunks(c)).zip(denom) {
                    let dot: f64 = dr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gv, &w) in dr.iter_mut().zip(yr) {
                        let s = w * d;
                        *gv = s * (1.0 - s) / d * (*gv - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                scale,
                shift,
                normalized,
                inv_std,
            } => {
                let gamma = &self.nodes[scale.0].value;
                let c = gamma.len();
                let n = c as f64;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for (r, (gr, xr)) in g.data().chunks(c).zip(normalized.chunks(c)).enumerate() {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..c {
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gamma.data()[j];
                        sum_d += dxh;
                        sum_dx += dxh * xr[j];
                    }
                    let inv = inv_std[r];
                    for j in 0..c {
                        let dxh = gr[j] * gamma.data()[j];
                        dx[r * c + j] = inv / n * (n * dxh - sum_d - xr[j] * sum_dx);
                    }
                }
                out.push((*x, Tensor::new(&shape, dx).expect("shape")));
                out.push((*scale, Tensor::new(gamma.shape(), dgamma).expect("shape")));
                let bs = self.nodes[shift.0].value.shape().to_vec();
                out.push((*shift, Tensor::new(&bs, dbeta).expect("shape")));
            }
            Op::Dropout(x, mask) => {
                let data = g.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                out.push((*x, Tensor::new(&shape, data).expect("shape")));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let piece = g.slice_cols(offset, w);
                    offset += w;
                    let ps = self.nodes[p.0].value.shape().to_vec();
                    out.push((*p, piece.reshape(&ps).expect("shape")));
                }
            }
            Op::SliceCols(x, start) => {
                let xv = &self.nodes[x.0].value;
                let (r, c) = xv.matrix_dims();
                let len = g.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(g.row(i));
                }
                out.push((*x, Tensor::new(xv.shape(), dx).expect("shape")));
            }
            Op::Sum(x) => {
                let xv = &self.nodes[x.0].value;
                out.push((*x, Tensor::filled(xv.shape(), g.data()[0])));
            }
            Op::Mean(x) => {
                let xv = &self.nodes[x.0].value;
                out.push((*x, Tensor::filled(xv.shape(), g.data()[0] / xv.len() as f64)));
            }
            Op::Pool {
                x,
                segments,
                method,
                argmax,
            } => {
                let xv = &self.nodes[x.0].value;
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                for (s, seg) in segments.iter().enumerate() {
                    let gr = g.row(s);
                    match method {
                        Pooling::Mean => {
                            let n = seg.valid as f64;
                            for i in seg.start..seg.start + seg.valid {
                                let dst = &mut dx.data_mut()[i * c..(i + 1) * c];
                                dst.iter_mut().zip(gr).for_each(|(d, v)| *d += v / n);
                            }
                        }
                        Pooling::Max => {
                            for (j, gv) in gr.iter().enumerate() {
                                let row = argmax[s * c + j];
                                dx.data_mut()[row * c + j] += gv;
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Bce { probs, labels } => {
                let p = &self.nodes[probs.0].value;
                let n = p.len() as f64;
                let scale = g.data()[0] / n;
                let data = p
                    .data()
                    .iter()
                    .zip(labels.data())
                    .map(|(&p, &y)| {
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                            0.0
                        } else {
                            scale * (-y / p + (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                out.push((*probs, Tensor::new(p.shape(), data).expect("shape")));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                func,
                cache,
            } => {
                let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                let (qw, vw) = (qv.cols(), vv.cols());
                let (dk, dv) = (qw / heads, vw / heads);
                let mut dq = vec![0.0; qv.len()];
                let mut dkk = vec![0.0; kv.len()];
                let mut dvv = vec![0.0; vv.len()];
                let mut ci = 0;
                for seg in segments {
                    let (nq, nk) = (seg.q_len, seg.k_len);
                    for h in 0..*heads {
                        let hc = &cache[ci];
                        ci += 1;
                        let qh = block(qv, seg.q_start, nq, h * dk, dk);
                        let kh = block(kv, seg.k_start, nk, h * dk, dk);
                        let vh = block(vv, seg.k_start, nk, h * dv, dv);
                        let ga = block(g, seg.q_start, nq, h * dv, dv);
                        let mut wd = hc.weights.clone();
                        if let Some(m) = &hc.dropout {
                            wd.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
                        }
                        // dV = Wdᵀ dA
                        let mut dvh = vec![0.0; nk * dv];
                        gemm(nk, nq, dv, &wd, true, &ga, false, &mut dvh, 0.0);
                        // dW = dA Vᵀ (⊙ dropout mask)
                        let mut dw = vec![0.0; nq * nk];
                        gemm(nq, dv, nk, &ga, false, &vh, true, &mut dw, 0.0);
                        if let Some(m) = &hc.dropout {
                            dw.iter_mut().zip(m).for_each(|(a, b)| *a *= b);
                        }
                        attention::attention_logit_grad(
                            &hc.weights,
                            &hc.denom,
                            &mut dw,
                            nq,
                            nk,
                            seg.k_valid,
                            dk,
                            *func,
                        );
                        let mut dqh = vec![0.0; nq * dk];
                        gemm(nq, nk, dk, &dw, false, &kh, false, &mut dqh, 0.0);
                        let mut dkh = vec![0.0; nk * dk];
                        gemm(nk, nq, dk, &dw, true, &qh, false, &mut dkh, 0.0);
                        scatter_add(&mut dq, qw, seg.q_start, nq, h * dk, dk, &dqh);
                        scatter_add(&mut dkk, qw, seg.k_start, nk, h * dk, dk, &dkh);
                        scatter_add(&mut dvv, vw, seg.k_start, nk, h * dv, dv, &dvh);
                    }
                }
                out.push((*q, Tensor::new(qv.shape(), dq).expect("shape")));
                out.push((*k, Tensor::new(kv.shape(), dkk).expect("shape")));
                out.push((*v, Tensor::new(vv.shape(), dvv).expect("shape")));
            }
        }
        for (id, contribution) in out {
            self.accumulate(id, contribution);
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Mask of `0` or `1/(1-rate)` entries.
fn dropout_mask(n: usize, rate: f64, rng: &mut RandomSource) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..n).map(|_| if rng.unit() < rate { 0.0 } else { keep }).collect()
}

/// Inverted dropout on a plain tensor. `training == false` is the identity.
pub fn dropout(x: &Tensor, rate: f64, training: bool, rng: &mut RandomSource) -> Result<Tensor> {
    check_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
    Tensor::new(x.shape(), data)
}

/// Contiguous copy of rows `r0..r0+nr`, columns `c0..c0+nc` of a matrix.
fn block(t: &Tensor, r0: usize, nr: usize, c0: usize, nc: usize) -> Vec<f64> {
    let c = t.cols();
    let mut out = Vec::with_capacity(nr * nc);
    for i in r0..r0 + nr {
        out.extend_from_slice(&t.data()[i * c + c0..i * c + c0 + nc]);
    }
    out
}

fn scatter_add(dst: &mut [f64], width: usize, r0: usize, nr: usize, c0: usize, nc: usize, src: &[f64]) {
    for i in 0..nr {
        let d = &mut dst[(r0 + i) * width + c0..(r0 + i) * width + c0 + nc];
        d.iter_mut().zip(&src[i * nc..(i + 1) * nc]).for_each(|(a, b)| *a += b);
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(b.shape(), data).expect("same length")
}

fn reshape_like(g: &Tensor, like: &Tensor) -> Tensor {
    g.clone().reshape(like.shape()).expect("same element count")
}
