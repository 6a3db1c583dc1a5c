use avtransformer::attention::{multi_head_attention_node, AttentionFunction, Mode, MultiHeadParams};
use avtransformer::gradcheck::{gradient_check, DEFAULT_STEP};
use avtransformer::graph::{AttentionSegment, Pooling, RowSegment};
use avtransformer::model::{init_params, Modality, ModelConfig, StreamInput};
use avtransformer::params::ParamSet;
use avtransformer::{RandomSource, Tensor};

const FUNCTIONS: [AttentionFunction; 3] = [
    AttentionFunction::Softmax,
    AttentionFunction::Sigmoid,
    AttentionFunction::NormalizedSigmoid { epsilon: 1e-12 },
];

fn random(shape: &[usize], rng: &mut RandomSource) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

#[test]
fn primitive_compositions() {
    let mut rng = RandomSource::new(11);
    let mut ps = ParamSet::new();
    let a = ps.insert("a", random(&[3, 5], &mut rng)).unwrap();
    let b = ps.insert("b", random(&[5, 4], &mut rng)).unwrap();
    let bias = ps.insert("bias", random(&[4], &mut rng)).unwrap();
    let scale = ps.insert("scale", random(&[4], &mut rng)).unwrap();
    let shift = ps.insert("shift", random(&[4], &mut rng)).unwrap();
    let err = gradient_check(&mut ps, DEFAULT_STEP, |g, ps| {
        let (an, bn) = (g.param(ps, a), g.param(ps, b));
        let x = g.matmul(an, bn)?;
        let bn = g.param(ps, bias);
        let x = g.add_bias(x, bn)?;
        let (s, t) = (g.param(ps, scale), g.param(ps, shift));
        let ln = g.layer_norm(x, s, t)?;
        let sm = g.softmax_rows(ln)?;
        let ns = g.normalized_sigmoid_rows(x, 1e-12)?;
        let r = g.relu(x);
        let sg = g.sigmoid(r);
        let c = g.concat_cols(&[sm, ns, sg])?;
        let c = g.slice_cols(c, 2, 7)?;
        let sq = g.mul(c, c)?;
        let m = g.mean(sq);
        let z = g.mul(sm, sm)?;
        let zs = g.sum(z);
        let total = g.add(m, zs)?;
        Ok(g.scale(total, 0.7))
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn multi_head_block_d8() {
    for func in FUNCTIONS {
        let mut rng = RandomSource::new(5);
        let mut ps = ParamSet::new();
        let block = MultiHeadParams::register(&mut ps, "mha", 8, 2, 4, &mut rng).unwrap();
        let q_in = random(&[7, 8], &mut rng);
        let kv_in = random(&[9, 8], &mut rng);
        let segments = vec![
            AttentionSegment {
                q_start: 0,
                q_len: 3,
                k_start: 0,
                k_len: 5,
                k_valid: 4,
            },
            AttentionSegment {
                q_start: 3,
                q_len: 4,
                k_start: 5,
                k_len: 4,
                k_valid: 4,
            },
        ];
        let err = gradient_check(&mut ps, DEFAULT_STEP, |g, ps| {
            let q = g.constant(q_in.clone());
            let kv = g.constant(kv_in.clone());
            let (out, _) =
                multi_head_attention_node(g, ps, &block, q, kv, segments.clone(), func, &mut Mode::inference())?;
            let s = g.sigmoid(out);
            Ok(g.mean(s))
        })
        .unwrap();
        assert!(err < 1e-4, "{func}: relative error {err}");
    }
}

fn small_config(func: AttentionFunction) -> ModelConfig {
    ModelConfig {
        n_blocks: 2,
        n_heads: 2,
        d_model: 8,
        d_ff: 8,
        dropout: 0.0,
        attention: func,
        aggregation: Pooling::Mean,
        first_modality: Modality::Audio,
        second_modality: Modality::Video,
        pos_enc_first: true,
        pos_enc_second: true,
        n_classes: 3,
        audio_dim: 5,
        video_dim: 6,
    }
}

#[test]
fn full_model_d8_two_blocks() {
    for func in FUNCTIONS {
        let cfg = small_config(func);
        let mut rng = RandomSource::new(21);
        let (model, mut ps) = init_params(&cfg, &mut rng).unwrap();
        // two clips, the second padded from 3 to 4 frames
        let first = StreamInput {
            frames: random(&[8, 5], &mut rng),
            segments: vec![
                RowSegment {
                    start: 0,
                    len: 4,
                    valid: 4,
                },
                RowSegment {
                    start: 4,
                    len: 4,
                    valid: 3,
                },
            ],
        };
        let second = StreamInput {
            frames: random(&[8, 6], &mut rng),
            segments: first.segments.clone(),
        };
        let labels = Tensor::from_rows(&[&[1.0, 0.0, 1.0], &[0.0, 0.0, 1.0]]);
        let err = gradient_check(&mut ps, DEFAULT_STEP, |g, ps| {
            let nodes = model.forward_graph(g, ps, &first, &second, &mut Mode::inference())?;
            g.bce(nodes.clip_probs, labels.clone())
        })
        .unwrap();
        assert!(err < 1e-4, "{func}: relative error {err}");
    }
}

#[test]
fn full_model_max_pooling() {
    let mut cfg = small_config(AttentionFunction::Softmax);
    cfg.aggregation = Pooling::Max;
    let mut rng = RandomSource::new(8);
    let (model, mut ps) = init_params(&cfg, &mut rng).unwrap();
    let first = StreamInput::single(
        random(&[4, 5], &mut rng),
        &avtransformer::attention::SequenceMask::all_valid(4),
    )
    .unwrap();
    let second = StreamInput::single(
        random(&[4, 6], &mut rng),
        &avtransformer::attention::SequenceMask::all_valid(4),
    )
    .unwrap();
    let labels = Tensor::from_rows(&[&[1.0, 0.0, 1.0]]);
    let err = gradient_check(&mut ps, DEFAULT_STEP, |g, ps| {
        let nodes = model.forward_graph(g, ps, &first, &second, &mut Mode::inference())?;
        g.bce(nodes.clip_probs, labels.clone())
    })
    .unwrap();
    assert!(err < 1e-4, "relative error {err}");
}
