//! The audiovisual encoder-decoder network.
//!
//! Pipeline for a batch of clips, rows of all clips stacked:
//!
//! 1. per-stream input linear map to `d_model`, dropout;
//! 2. optional sinusoidal positional encodings;
//! 3. `n_blocks` encoder blocks over the first stream
//!    (self-attention, add & norm, feedforward, add & norm);
//! 4. `n_blocks` decoder blocks over the second stream (self-attention,
//!    add & norm, cross-attention into the final encoder output, add & norm,
//!    feedforward, add & norm);
//! 5. a shared sigmoid layer per second-stream frame, pooled per clip.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::attention::{
    glorot, multi_head_attention_node, AttentionFunction, AttentionWeights, Mode, MultiHeadParams, SequenceMask,
};
use crate::error::{Error, Result};
use crate::graph::{AttentionSegment, Graph, NodeId, Pooling, RowSegment};
use crate::params::{ParamId, ParamSet};
use crate::rng::RandomSource;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Audio,
    Video,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Audio => "audio",
            Modality::Video => "video",
        })
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Modality::Audio),
            "video" => Ok(Modality::Video),
            other => Err(Error::param(format!("unknown modality {other:?}"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            other => Err(Error::param(format!("unknown aggregation {other:?}"))),
        }
    }
}

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub attention: AttentionFunction,
    pub aggregation: Pooling,
    pub first_modality: Modality,
    pub second_modality: Modality,
    pub pos_enc_first: bool,
    pub pos_enc_second: bool,
    pub n_classes: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_blocks: 3,
            n_heads: 3,
            d_model: 128,
            d_ff: 128,
            dropout: 0.1,
            attention: AttentionFunction::Softmax,
            aggregation: Pooling::Mean,
            first_modality: Modality::Audio,
            second_modality: Modality::Video,
            pos_enc_first: false,
            pos_enc_second: true,
            n_classes: 17,
            audio_dim: 128,
            video_dim: 4096,
        }
    }
}

impl ModelConfig {
    /// Per-head projection width, `floor(d_model / n_heads)`.
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn input_dim(&self, modality: Modality) -> usize {
        match modality {
            Modality::Audio => self.audio_dim,
            Modality::Video => self.video_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("blocks", self.n_blocks),
            ("heads", self.n_heads),
            ("d-model", self.d_model),
            ("d-ff", self.d_ff),
            ("classes", self.n_classes),
            ("audio-dim", self.audio_dim),
            ("video-dim", self.video_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::param(format!("{name} must be at least 1")));
        }
        if self.n_heads > self.d_model {
            return Err(Error::param(format!(
                "{} heads leave no width in d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if (self.pos_enc_first || self.pos_enc_second) && !self.d_model.is_multiple_of(2) {
            return Err(Error::param(format!(
                "positional encodings need an even d_model, got {}",
                self.d_model
            )));
        }
        self.attention.validate()
    }

    /// `none`, `first`, `second` or `first,second`.
    pub fn pos_enc_label(&self) -> &'static str {
        match (self.pos_enc_first, self.pos_enc_second) {
            (true, true) => "first,second",
            (true, false) => "first",
            (false, true) => "second",
            (false, false) => "none",
        }
    }

    pub fn set_pos_enc(&mut self, label: &str) -> Result<()> {
        let (mut first, mut second) = (false, false);
        for part in label.split(',').map(str::trim) {
            match part {
                "first" => first = true,
                "second" => second = true,
                "none" | "" => {}
                other => return Err(Error::param(format!("unknown positional-encoding stream {other:?}"))),
            }
        }
        self.pos_enc_first = first;
        self.pos_enc_second = second;
        Ok(())
    }

    /// Flat key/value view, keyed like the command-line flags.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = vec![
            ("blocks", self.n_blocks.to_string()),
            ("heads", self.n_heads.to_string()),
            ("d-model", self.d_model.to_string()),
            ("d-ff", self.d_ff.to_string()),
            ("dropout", format!("{:?}", self.dropout)),
            ("attention-fn", self.attention.to_string()),
        ];
        if let AttentionFunction::NormalizedSigmoid { epsilon } = self.attention {
            pairs.push(("attention-eps", format!("{epsilon:?}")));
        }
        pairs.extend([
            ("aggregation", self.aggregation.to_string()),
            ("first-modality", self.first_modality.to_string()),
            ("second-modality", self.second_modality.to_string()),
            ("pos-enc", self.pos_enc_label().to_string()),
            ("classes", self.n_classes.to_string()),
            ("audio-dim", self.audio_dim.to_string()),
            ("video-dim", self.video_dim.to_string()),
        ]);
        pairs
    }

    pub fn to_kv_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies every recognized key of `map` on top of `self`. Returns the
    /// keys that were consumed.
    pub fn apply_pairs(&mut self, map: &BTreeMap<String, String>) -> Result<Vec<String>> {
        let mut used = Vec::new();
        for (k, v) in map {
            let parse_usize = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::param(format!("{k}: expected a count, got {v:?}")))
            };
            match k.as_str() {
                "blocks" => self.n_blocks = parse_usize(v)?,
                "heads" => self.n_heads = parse_usize(v)?,
                "d-model" => self.d_model = parse_usize(v)?,
                "d-ff" => self.d_ff = parse_usize(v)?,
                "dropout" => {
                    self.dropout = v
                        .parse()
                        .map_err(|_| Error::param(format!("dropout: bad number {v:?}")))?
                }
                "attention-fn" => {
                    let eps = match self.attention {
                        AttentionFunction::NormalizedSigmoid { epsilon } => Some(epsilon),
                        _ => None,
                    };
                    self.attention = v.parse()?;
                    if let (AttentionFunction::NormalizedSigmoid { epsilon }, Some(e)) = (&mut self.attention, eps) {
                        *epsilon = e;
                    }
                }
                "aggregation" => self.aggregation = v.parse()?,
                "first-modality" => self.first_modality = v.parse()?,
                "second-modality" => self.second_modality = v.parse()?,
                "pos-enc" => self.set_pos_enc(v)?,
                "classes" => self.n_classes = parse_usize(v)?,
                "audio-dim" => self.audio_dim = parse_usize(v)?,
                "video-dim" => self.video_dim = parse_usize(v)?,
                "attention-eps" => {}
                _ => continue,
            }
            used.push(k.clone());
        }
        if let Some(v) = map.get("attention-eps") {
            let e: f64 = v
                .parse()
                .map_err(|_| Error::param(format!("attention-eps: bad number {v:?}")))?;
            if let AttentionFunction::NormalizedSigmoid { epsilon } = &mut self.attention {
                *epsilon = e;
            }
            used.push("attention-eps".into());
        }
        Ok(used)
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let mut cfg = ModelConfig::default();
        cfg.apply_pairs(&map)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::param(format!("line {}: expected key=value, got {line:?}", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_positional_encoding(length: usize, d_model: usize) -> Result<Tensor> {
    if length == 0 || d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::param(format!(
            "positional encoding needs positive length and even width, got {length} × {d_model}"
        )));
    }
    let mut data = vec![0.0; length * d_model];
    for pos in 0..length {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(&[length, d_model], data)
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    fn register(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let weight = params.insert(format!("{name}.weight"), glorot(fan_in, fan_out, rng))?;
        let bias = params.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?;
        Ok(Linear {
            weight,
            bias: Some(bias),
        })
    }

    fn apply(&self, g: &mut Graph, params: &ParamSet, x: NodeId) -> Result<NodeId> {
        let w = g.param(params, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(params, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
struct Norm {
    scale: ParamId,
    shift: ParamId,
}

impl Norm {
    fn register(params: &mut ParamSet, name: &str, d: usize) -> Result<Self> {
        Ok(Norm {
            scale: params.insert(format!("{name}.scale"), Tensor::filled(&[d], 1.0))?,
            shift: params.insert(format!("{name}.shift"), Tensor::zeros(&[d]))?,
        })
    }

    /// `layer_norm(x + residual)`
    fn add_norm(&self, g: &mut Graph, params: &ParamSet, x: NodeId, residual: NodeId) -> Result<NodeId> {
        let sum = g.add(x, residual)?;
        let scale = g.param(params, self.scale);
        let shift = g.param(params, self.shift);
        g.layer_norm(sum, scale, shift)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    hidden: Linear,
    output: Linear,
}

impl FeedForward {
    fn register(params: &mut ParamSet, name: &str, cfg: &ModelConfig, rng: &mut RandomSource) -> Result<Self> {
        Ok(FeedForward {
            hidden: Linear::register(params, &format!("{name}.hidden"), cfg.d_model, cfg.d_ff, rng)?,
            output: Linear::register(params, &format!("{name}.output"), cfg.d_ff, cfg.d_model, rng)?,
        })
    }

    fn apply(&self, g: &mut Graph, params: &ParamSet, x: NodeId, mode: &mut Mode<'_>) -> Result<NodeId> {
        let h = self.hidden.apply(g, params, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, mode.dropout, mode.rng.as_deref_mut())?;
        let y = self.output.apply(g, params, h)?;
        g.dropout(y, mode.dropout, mode.rng.as_deref_mut())
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attention: MultiHeadParams,
    norm_attention: Norm,
    feedforward: FeedForward,
    norm_feedforward: Norm,
}

#[derive(Clone, Debug)]
struct DecoderBlock {
    self_attention: MultiHeadParams,
    norm_self: Norm,
    cross_attention: MultiHeadParams,
    norm_cross: Norm,
    feedforward: FeedForward,
    norm_feedforward: Norm,
}

/// One stream of a batch: frames of all clips stacked along rows.
#[derive(Clone, Debug)]
pub struct StreamInput {
    pub frames: Tensor,
    pub segments: Vec<RowSegment>,
}

impl StreamInput {
    pub fn single(frames: Tensor, mask: &SequenceMask) -> Result<Self> {
        if mask.len() != frames.rows() {
            return Err(Error::dim(format!(
                "mask of {} positions for {} frames",
                mask.len(),
                frames.rows()
            )));
        }
        Ok(StreamInput {
            segments: vec![RowSegment {
                start: 0,
                len: frames.rows(),
                valid: mask.valid(),
            }],
            frames,
        })
    }
}

/// Attention weights captured for one clip.
#[derive(Clone, Debug, Default)]
pub struct ClipAttention {
    pub encoder_self: Vec<AttentionWeights>,
    pub decoder_self: Vec<AttentionWeights>,
    pub decoder_cross: Vec<AttentionWeights>,
}

/// Graph handles produced by a batched forward pass.
pub struct ForwardNodes {
    /// `Σ T₂ × n_classes` frame probabilities (all clips stacked).
    pub frame_probs: NodeId,
    /// `B × n_classes` clip probabilities.
    pub clip_probs: NodeId,
    pub attention: Vec<ClipAttention>,
}

/// Result of running one clip through the model.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub frame_probs: Tensor,
    pub clip_probs: Vec<f64>,
    pub attention: ClipAttention,
}

/// Parameter layout of an initialized network. The weights themselves live
/// in a separate [`ParamSet`] so snapshots can be swapped freely.
#[derive(Clone, Debug)]
pub struct AvTransformer {
    config: ModelConfig,
    input_first: Linear,
    input_second: Linear,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    output: Linear,
}

/// Creates the network and its Glorot-initialized parameters.
pub fn init_params(config: &ModelConfig, rng: &mut RandomSource) -> Result<(AvTransformer, ParamSet)> {
    config.validate()?;
    let mut p = ParamSet::new();
    let cfg = config;
    let (d, h, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head());
    let input_first = Linear::register(&mut p, "input.first", cfg.input_dim(cfg.first_modality), d, rng)?;
    let input_second = Linear::register(&mut p, "input.second", cfg.input_dim(cfg.second_modality), d, rng)?;
    let mut encoder = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let name = format!("encoder.{b}");
        encoder.push(EncoderBlock {
            attention: MultiHeadParams::register(&mut p, &format!("{name}.self"), d, h, dh, rng)?,
            norm_attention: Norm::register(&mut p, &format!("{name}.norm_self"), d)?,
            feedforward: FeedForward::register(&mut p, &format!("{name}.ff"), cfg, rng)?,
            norm_feedforward: Norm::register(&mut p, &format!("{name}.norm_ff"), d)?,
        });
    }
    let mut decoder = Vec::with_capacity(cfg.n_blocks);
    for b in 0..cfg.n_blocks {
        let name = format!("decoder.{b}");
        decoder.push(DecoderBlock {
            self_attention: MultiHeadParams::register(&mut p, &format!("{name}.self"), d, h, dh, rng)?,
            norm_self: Norm::register(&mut p, &format!("{name}.norm_self"), d)?,
            cross_attention: MultiHeadParams::register(&mut p, &format!("{name}.cross"), d, h, dh, rng)?,
            norm_cross: Norm::register(&mut p, &format!("{name}.norm_cross"), d)?,
            feedforward: FeedForward::register(&mut p, &format!("{name}.ff"), cfg, rng)?,
            norm_feedforward: Norm::register(&mut p, &format!("{name}.norm_ff"), d)?,
        });
    }
    let output = Linear::register(&mut p, "output", d, cfg.n_classes, rng)?;
    let model = AvTransformer {
        config: config.clone(),
        input_first,
        input_second,
        encoder,
        decoder,
        output,
    };
    Ok((model, p))
}

impl AvTransformer {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Rebuilds the layout for `config` and checks that `params` matches it
    /// name for name and shape for shape.
    pub fn for_params(config: &ModelConfig, params: &ParamSet) -> Result<Self> {
        let (model, template) = init_params(config, &mut RandomSource::new(0))?;
        if template.len() != params.len() {
            return Err(Error::data(format!(
                "config expects {} parameters, found {}",
                template.len(),
                params.len()
            )));
        }
        for (a, b) in template.iter().zip(params.iter()) {
            if a.id != b.id || a.value.shape() != b.value.shape() {
                return Err(Error::data(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    a.id,
                    a.value.shape(),
                    b.id,
                    b.value.shape()
                )));
            }
        }
        Ok(model)
    }

    #[allow(clippy::too_many_arguments)]
    fn embed(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        input: &StreamInput,
        map: &Linear,
        expected_dim: usize,
        positional: bool,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        if input.frames.cols() != expected_dim {
            return Err(Error::dim(format!(
                "stream has {}-dimensional frames, model expects {expected_dim}",
                input.frames.cols()
            )));
        }
        check_segments(&input.segments, input.frames.rows())?;
        let x = g.constant(input.frames.clone());
        let x = map.apply(g, params, x)?;
        let x = g.dropout(x, mode.dropout, mode.rng.as_deref_mut())?;
        if !positional {
            return Ok(x);
        }
        let d = self.config.d_model;
        let longest = input.segments.iter().map(|s| s.len).max().unwrap_or(1);
        let table = sinusoidal_positional_encoding(longest, d)?;
        let mut pe = Tensor::zeros(&[input.frames.rows(), d]);
        for seg in &input.segments {
            pe.data_mut()[seg.start * d..(seg.start + seg.len) * d].copy_from_slice(&table.data()[..seg.len * d]);
        }
        let pe = g.constant(pe);
        g.add(x, pe)
    }

    /// Adds the whole network to `graph` for a batch of clips.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        first: &StreamInput,
        second: &StreamInput,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardNodes> {
        let cfg = &self.config;
        if first.segments.len() != second.segments.len() {
            return Err(Error::dim(format!(
                "{} clips in the first stream, {} in the second",
                first.segments.len(),
                second.segments.len()
            )));
        }
        let n_clips = first.segments.len();
        let mode_dropout = if mode.is_training() { cfg.dropout } else { 0.0 };
        let saved = mode.dropout;
        mode.dropout = mode_dropout;

        let self_segments = |s: &[RowSegment]| -> Vec<AttentionSegment> {
            s.iter()
                .map(|r| AttentionSegment {
                    q_start: r.start,
                    q_len: r.len,
                    k_start: r.start,
                    k_len: r.len,
                    k_valid: r.valid,
                })
                .collect()
        };
        let cross_segments: Vec<AttentionSegment> = second
            .segments
            .iter()
            .zip(&first.segments)
            .map(|(q, k)| AttentionSegment {
                q_start: q.start,
                q_len: q.len,
                k_start: k.start,
                k_len: k.len,
                k_valid: k.valid,
            })
            .collect();

        let mut attention = vec![ClipAttention::default(); n_clips];
        let mut record = |dst: fn(&mut ClipAttention) -> &mut Vec<AttentionWeights>, weights: Vec<AttentionWeights>| {
            for (clip, w) in attention.iter_mut().zip(weights) {
                dst(clip).push(w);
            }
        };

        let mut enc = self.embed(
            g,
            params,
            first,
            &self.input_first,
            cfg.input_dim(cfg.first_modality),
            cfg.pos_enc_first,
            mode,
        )?;
        for block in &self.encoder {
            let (att, w) = multi_head_attention_node(
                g,
                params,
                &block.attention,
                enc,
                enc,
                self_segments(&first.segments),
                cfg.attention,
                mode,
            )?;
            record(|c| &mut c.encoder_self, w);
            let x = block.norm_attention.add_norm(g, params, att, enc)?;
            let ff = block.feedforward.apply(g, params, x, mode)?;
            enc = block.norm_feedforward.add_norm(g, params, ff, x)?;
        }

        let mut dec = self.embed(
            g,
            params,
            second,
            &self.input_second,
            cfg.input_dim(cfg.second_modality),
            cfg.pos_enc_second,
            mode,
        )?;
        for block in &self.decoder {
            let (att, w) = multi_head_attention_node(
                g,
                params,
                &block.self_attention,
                dec,
                dec,
                self_segments(&second.segments),
                cfg.attention,
                mode,
            )?;
            record(|c| &mut c.decoder_self, w);
            let x = block.norm_self.add_norm(g, params, att, dec)?;
            let (cross, w) = multi_head_attention_node(
                g,
                params,
                &block.cross_attention,
                x,
                enc,
                cross_segments.clone(),
                cfg.attention,
                mode,
            )?;
            record(|c| &mut c.decoder_cross, w);
            let y = block.norm_cross.add_norm(g, params, cross, x)?;
            let ff = block.feedforward.apply(g, params, y, mode)?;
            dec = block.norm_feedforward.add_norm(g, params, ff, y)?;
        }

        let logits = self.output.apply(g, params, dec)?;
        let frame_probs = g.sigmoid(logits);
        let clip_probs = g.pool(frame_probs, second.segments.clone(), cfg.aggregation)?;
        mode.dropout = saved;
        Ok(ForwardNodes {
            frame_probs,
            clip_probs,
            attention,
        })
    }

    /// Runs one clip through the network.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        params: &ParamSet,
        first_seq: &Tensor,
        second_seq: &Tensor,
        first_mask: &SequenceMask,
        second_mask: &SequenceMask,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardTrace> {
        let first = StreamInput::single(first_seq.clone(), first_mask)?;
        let second = StreamInput::single(second_seq.clone(), second_mask)?;
        let mut g = Graph::new();
        let nodes = self.forward_graph(&mut g, params, &first, &second, mode)?;
        Ok(ForwardTrace {
            frame_probs: g.value(nodes.frame_probs).clone(),
            clip_probs: g.value(nodes.clip_probs).row(0).to_vec(),
            attention: nodes.attention.into_iter().next().unwrap_or_default(),
        })
    }

    /// Inference-mode clip probabilities (`B × n_classes`) for a batch.
    pub fn predict(&self, params: &ParamSet, first: &StreamInput, second: &StreamInput) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.forward_graph(&mut g, params, first, second, &mut Mode::inference())?;
        Ok(g.value(nodes.clip_probs).clone())
    }
}

fn check_segments(segments: &[RowSegment], rows: usize) -> Result<()> {
    let mut next = 0;
    for (i, s) in segments.iter().enumerate() {
        if s.valid == 0 {
            return Err(Error::contract(format!("clip {i} has no valid frames")));
        }
        if s.start != next || s.valid > s.len {
            return Err(Error::dim(format!("malformed segment {i}: {s:?}")));
        }
        next = s.start + s.len;
    }
    if next != rows {
        return Err(Error::dim(format!("segments cover {next} of {rows} rows")));
    }
    Ok(())
}

/// Pools frame probabilities (`T × n_classes`) over the valid frames.
pub fn aggregate(frame_probs: &Tensor, method: Pooling, mask: &SequenceMask) -> Result<Vec<f64>> {
    if mask.len() != frame_probs.rows() {
        return Err(Error::dim(format!(
            "mask of {} positions for {} frames",
            mask.len(),
            frame_probs.rows()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(frame_probs.clone());
    let seg = RowSegment {
        start: 0,
        len: mask.len(),
        valid: mask.valid(),
    };
    let pooled = g.pool(x, vec![seg], method)?;
    Ok(g.value(pooled).row(0).to_vec())
}
