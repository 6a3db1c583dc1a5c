//! Scaled dot-product attention with swappable weight functions, and the
//! multi-head block built on top of it.
//!
//! The single-head kernels in this module work on contiguous row-major
//! slices and are shared by the plain-tensor entry points
//! ([`scaled_dot_product_attention`], [`multi_head_attention`]) and by the
//! differentiable graph op used during training.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{AttentionSegment, Graph, NodeId};
use crate::params::{ParamId, ParamSet};
use crate::rng::RandomSource;
use crate::tensor::{self, sigmoid_scalar, Tensor};

/// Default offset in the normalized-sigmoid denominator.
pub const NORMALIZED_SIGMOID_EPS: f64 = 1e-12;

/// Nonlinearity that turns scaled dot products into attention weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttentionFunction {
    Softmax,
    Sigmoid,
    NormalizedSigmoid { epsilon: f64 },
}

impl AttentionFunction {
    pub fn normalized_sigmoid() -> Self {
        AttentionFunction::NormalizedSigmoid {
            epsilon: NORMALIZED_SIGMOID_EPS,
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match *self {
            AttentionFunction::NormalizedSigmoid { epsilon } if !(epsilon > 0.0) => Err(Error::param(format!(
                "normalized sigmoid epsilon must be positive, got {epsilon}"
            ))),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AttentionFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionFunction::Softmax => f.write_str("softmax"),
            AttentionFunction::Sigmoid => f.write_str("sigmoid"),
            AttentionFunction::NormalizedSigmoid { .. } => f.write_str("normalized-sigmoid"),
        }
    }
}

impl FromStr for AttentionFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(AttentionFunction::Softmax),
            "sigmoid" => Ok(AttentionFunction::Sigmoid),
            "normalized-sigmoid" | "normalized_sigmoid" => Ok(AttentionFunction::normalized_sigmoid()),
            other => Err(Error::param(format!("unknown attention function {other:?}"))),
        }
    }
}

/// Validity flags for a padded sequence. Valid positions form a prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceMask {
    len: usize,
    valid: usize,
}

impl SequenceMask {
    /// Mask of `len` positions of which the first `valid` are real frames.
    pub fn new(len: usize, valid: usize) -> Result<Self> {
        if valid == 0 || valid > len {
            return Err(Error::contract(format!(
                "mask needs 1..={len} valid positions, got {valid}"
            )));
        }
        Ok(SequenceMask { len, valid })
    }

    pub fn all_valid(len: usize) -> Self {
        SequenceMask { len, valid: len }
    }

    /// Builds a mask from explicit flags, which must be a non-empty valid prefix.
    pub fn from_flags(flags: &[bool]) -> Result<Self> {
        let valid = flags.iter().take_while(|f| **f).count();
        if flags[valid..].iter().any(|f| *f) {
            return Err(Error::contract("mask valid positions must form a prefix"));
        }
        SequenceMask::new(flags.len(), valid)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn valid(&self) -> usize {
        self.valid
    }

    pub fn is_valid(&self, pos: usize) -> bool {
        pos < self.valid
    }

    pub fn flags(&self) -> Vec<bool> {
        (0..self.len).map(|i| i < self.valid).collect()
    }
}

/// Attention weights of one multi-head block: `heads × n_queries × n_keys`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub weights: Tensor,
}

impl AttentionWeights {
    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn queries(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn keys(&self) -> usize {
        self.weights.shape()[2]
    }

    /// Weight matrix of one head as `n_queries × n_keys`.
    pub fn head(&self, h: usize) -> Tensor {
        let (q, k) = (self.queries(), self.keys());
        Tensor::new(&[q, k], self.weights.data()[h * q * k..(h + 1) * q * k].to_vec()).expect("head slice")
    }
}

/// Fills `w` (`nq × nk`) with attention weights from `q` (`nq × dk`) and the
/// first `valid` rows of `k` (`nk × dk`). Masked columns are set to zero.
/// `denom` receives each row's normalized-sigmoid denominator `Σσ + ε`
/// (1 for the other functions).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_weights_into(
    q: &[f64],
    k: &[f64],
    nq: usize,
    nk: usize,
    dk: usize,
    valid: usize,
    func: AttentionFunction,
    w: &mut [f64],
    denom: &mut [f64],
) {
    let scale = 1.0 / (dk as f64).sqrt();
    for i in 0..nq {
        let qi = &q[i * dk..(i + 1) * dk];
        let row = &mut w[i * nk..(i + 1) * nk];
        for j in 0..valid {
            let kj = &k[j * dk..(j + 1) * dk];
            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
            row[j] = dot * scale;
        }
        row[valid..].fill(0.0);
        let live = &mut row[..valid];
        denom[i] = 1.0;
        match func {
            AttentionFunction::Softmax => tensor::softmax_in_place(live),
            AttentionFunction::Sigmoid => live.iter_mut().for_each(|v| *v = sigmoid_scalar(*v)),
            AttentionFunction::NormalizedSigmoid { epsilon } => {
                let mut total = 0.0;
                for v in live.iter_mut() {
                    *v = sigmoid_scalar(*v);
                    total += *v;
                }
                let d = total + epsilon;
                live.iter_mut().for_each(|v| *v /= d);
                denom[i] = d;
            }
        }
    }
}

/// Given the upstream gradient `dw` with respect to the (pre-dropout) weights,
/// overwrites it with the gradient with respect to the unscaled dot products
/// `q·kᵀ`. `w` and `denom` come from [`attention_weights_into`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_logit_grad(
    w: &[f64],
    denom: &[f64],
    dw: &mut [f64],
    nq: usize,
    nk: usize,
    valid: usize,
    dk: usize,
    func: AttentionFunction,
) {
    let scale = 1.0 / (dk as f64).sqrt();
    for i in 0..nq {
        let wr = &w[i * nk..i * nk + valid];
        let dr = &mut dw[i * nk..i * nk + valid];
        match func {
            AttentionFunction::Softmax => {
                let dot: f64 = wr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, &wv) in dr.iter_mut().zip(wr) {
                    *d = wv * (*d - dot) * scale;
                }
            }
            AttentionFunction::Sigmoid => {
                for (d, &wv) in dr.iter_mut().zip(wr) {
                    *d *= wv * (1.0 - wv) * scale;
                }
            }
            AttentionFunction::NormalizedSigmoid { .. } => {
                // w_j = σ_j / D  ⇒  ∂L/∂x_m = σ_m(1-σ_m)/D · (∂L/∂w_m − Σ_j w_j ∂L/∂w_j)
                let d = denom[i];
                let dot: f64 = wr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (g, &wv) in dr.iter_mut().zip(wr) {
                    let sig = wv * d;
                    *g = sig * (1.0 - sig) / d * (*g - dot) * scale;
                }
            }
        }
        dw[i * nk + valid..(i + 1) * nk].fill(0.0);
    }
}

/// Single-head attention `f(q kᵀ / √dk) v` over the unmasked keys.
///
/// Returns the weighted sums (`n_q × d_v`) and the weights (`n_q × n_k`);
/// masked key columns carry exactly zero weight.
pub fn scaled_dot_product_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &SequenceMask,
    func: AttentionFunction,
) -> Result<(Tensor, Tensor)> {
    func.validate()?;
    let (nq, dk) = q.matrix_dims();
    let (nk, dk2) = k.matrix_dims();
    let (nv, dv) = v.matrix_dims();
    if dk != dk2 {
        return Err(Error::dim(format!(
            "query width {dk} differs from key width {dk2} ({:?} vs {:?})",
            q.shape(),
            k.shape()
        )));
    }
    if nv != nk {
        return Err(Error::dim(format!("{nk} keys but {nv} values")));
    }
    if mask.len() != nk {
        return Err(Error::dim(format!("mask length {} for {nk} keys", mask.len())));
    }
    let mut w = vec![0.0; nq * nk];
    let mut denom = vec![0.0; nq];
    attention_weights_into(q.data(), k.data(), nq, nk, dk, mask.valid(), func, &mut w, &mut denom);
    let w = Tensor::new(&[nq, nk], w)?;
    let a = w.matmul(v)?;
    debug_assert_eq!(a.cols(), dv);
    Ok((a, w))
}

/// Parameter handles of one multi-head block. Head `h` owns the columns
/// `h·d_head .. (h+1)·d_head` of the concatenated projections.
#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
    pub d_head: usize,
}

impl MultiHeadParams {
    /// Registers the projections of an `n_heads` block under `prefix`.
    pub fn register(
        params: &mut ParamSet,
        prefix: &str,
        d_model: usize,
        n_heads: usize,
        d_head: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        if n_heads == 0 || d_head == 0 {
            return Err(Error::param(format!(
                "multi-head block needs heads ≥ 1 and head width ≥ 1, got {n_heads} / {d_head}"
            )));
        }
        let proj = |params: &mut ParamSet, kind: &str, rng: &mut RandomSource| {
            (0..n_heads)
                .map(|h| params.insert(format!("{prefix}.{kind}.h{h}"), glorot(d_model, d_head, rng)))
                .collect::<Result<Vec<_>>>()
        };
        let query = proj(params, "query", rng)?;
        let key = proj(params, "key", rng)?;
        let value = proj(params, "value", rng)?;
        let output = params.insert(format!("{prefix}.output"), glorot(n_heads * d_head, d_model, rng))?;
        Ok(MultiHeadParams {
            query,
            key,
            value,
            output,
            d_head,
        })
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }
}

/// Uniform Glorot initialization: `±√(6 / (fan_in + fan_out))`.
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut RandomSource) -> Tensor {
    let bound = glorot_bound(fan_in, fan_out);
    let data = (0..fan_in * fan_out).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive fan extents")
}

pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Dropout and randomness context for a forward pass. Inference mode has no
/// random source and never drops anything.
pub struct Mode<'a> {
    pub dropout: f64,
    pub rng: Option<&'a mut RandomSource>,
}

impl<'a> Mode<'a> {
    pub fn inference() -> Self {
        Mode {
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training mode. The model forward pass sets the rate from its config;
    /// standalone blocks use [`Mode::with_dropout`].
    pub fn training(rng: &'a mut RandomSource) -> Self {
        Mode {
            dropout: 0.0,
            rng: Some(rng),
        }
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        self.dropout = rate;
        self
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }
}

/// Adds a multi-head attention block to `graph`.
///
/// `queries` and `keys_values` hold several sequences stacked along rows;
/// `segments` says where each sequence lives and how many of its keys are
/// valid. Returns the block output node and, per segment, the
/// `heads × n_q × n_k` weights (before weight dropout).
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention_node(
    graph: &mut Graph,
    params: &ParamSet,
    block: &MultiHeadParams,
    queries: NodeId,
    keys_values: NodeId,
    segments: Vec<AttentionSegment>,
    func: AttentionFunction,
    mode: &mut Mode<'_>,
) -> Result<(NodeId, Vec<AttentionWeights>)> {
    let cat = |graph: &mut Graph, ids: &[ParamId]| -> Result<NodeId> {
        let nodes: Vec<NodeId> = ids.iter().map(|&id| graph.param(params, id)).collect();
        graph.concat_cols(&nodes)
    };
    let wq = cat(graph, &block.query)?;
    let wk = cat(graph, &block.key)?;
    let wv = cat(graph, &block.value)?;
    let q = graph.matmul(queries, wq)?;
    let k = graph.matmul(keys_values, wk)?;
    let v = graph.matmul(keys_values, wv)?;
    let (heads, weights) = graph.attention(
        q,
        k,
        v,
        block.heads(),
        segments,
        func,
        mode.dropout,
        mode.rng.as_deref_mut(),
    )?;
    let wo = graph.param(params, block.output);
    let out = graph.matmul(heads, wo)?;
    let out = graph.dropout(out, mode.dropout, mode.rng.as_deref_mut())?;
    Ok((out, weights))
}

/// Inference-mode multi-head attention on plain tensors for a single sequence.
pub fn multi_head_attention(
    q_in: &Tensor,
    kv_in: &Tensor,
    params: &ParamSet,
    block: &MultiHeadParams,
    mask: &SequenceMask,
    func: AttentionFunction,
) -> Result<(Tensor, AttentionWeights)> {
    if mask.len() != kv_in.rows() {
        return Err(Error::dim(format!(
            "mask length {} for {} key rows",
            mask.len(),
            kv_in.rows()
        )));
    }
    let mut graph = Graph::new();
    let q = graph.constant(q_in.clone());
    let kv = graph.constant(kv_in.clone());
    let seg = AttentionSegment {
        q_start: 0,
        q_len: q_in.rows(),
        k_start: 0,
        k_len: kv_in.rows(),
        k_valid: mask.valid(),
    };
    let (out, mut weights) = multi_head_attention_node(
        &mut graph,
        params,
        block,
        q,
        kv,
        vec![seg],
        func,
        &mut Mode::inference(),
    )?;
    Ok((graph.value(out).clone(), weights.remove(0)))
}
