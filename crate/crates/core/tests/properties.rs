use avtransformer::attention::{scaled_dot_product_attention, AttentionFunction, Mode, SequenceMask};
use avtransformer::data::{decode_embedding, encode_embedding, FrameSeq};
use avtransformer::evaluation::{apply_threshold, calibrate_threshold, default_grid, micro_f1};
use avtransformer::graph::Pooling;
use avtransformer::model::{init_params, ModelConfig};
use avtransformer::tensor::softmax_rows;
use avtransformer::training::build_balanced_sampler;
use avtransformer::{RandomSource, Tensor};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new(&[rows, cols], d).unwrap())
}

fn functions() -> impl Strategy<Value = AttentionFunction> {
    prop_oneof![
        Just(AttentionFunction::Softmax),
        Just(AttentionFunction::Sigmoid),
        Just(AttentionFunction::NormalizedSigmoid { epsilon: 1e-12 }),
    ]
}

fn binary(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::bool::ANY, rows * cols)
        .prop_map(move |d| Tensor::new(&[rows, cols], d.into_iter().map(f64::from).collect()).unwrap())
}

fn brute_f1(pred: &Tensor, labels: &Tensor) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (p, l) in pred.data().iter().zip(labels.data()) {
        match (*p == 1.0, *l == 1.0) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            _ => {}
        }
    }
    if tp + fp + fn_ == 0.0 {
        1.0
    } else {
        2.0 * tp / (2.0 * tp + fp + fn_)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_ignores_row_shifts(m in matrix(3, 5), shift in -50.0f64..50.0) {
        let a = softmax_rows(&m).unwrap();
        let b = softmax_rows(&m.map(|v| v + shift)).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        for r in 0..3 {
            prop_assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_weights_are_symmetric(q in matrix(2, 3), k in matrix(4, 3)) {
        let v = Tensor::identity(4);
        let mask = SequenceMask::all_valid(4);
        let (_, w) = scaled_dot_product_attention(&q, &k, &v, &mask, AttentionFunction::Sigmoid).unwrap();
        let (_, w_neg) = scaled_dot_product_attention(&q.map(|x| -x), &k, &v, &mask, AttentionFunction::Sigmoid).unwrap();
        for (a, b) in w.data().iter().zip(w_neg.data()) {
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalized_sigmoid_rows_stay_below_one(q in matrix(3, 2), k in matrix(5, 2), valid in 1usize..=5) {
        let mask = SequenceMask::new(5, valid).unwrap();
        let func = AttentionFunction::NormalizedSigmoid { epsilon: 1e-12 };
        let (_, w) = scaled_dot_product_attention(&q, &k, &Tensor::identity(5), &mask, func).unwrap();
        for r in 0..3 {
            let s: f64 = w.row(r).iter().sum();
            let total: f64 = (0..valid)
                .map(|j| {
                    let logit = (q.at(r, 0) * k.at(j, 0) + q.at(r, 1) * k.at(j, 1)) / 2f64.sqrt();
                    1.0 / (1.0 + (-logit).exp())
                })
                .sum();
            prop_assert!(s < 1.0);
            prop_assert!((s - total / (total + 1e-12)).abs() < 1e-12);
            prop_assert!(w.row(r)[valid..].iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn attention_is_equivariant_to_key_order(
        q in matrix(3, 4),
        k in matrix(5, 4),
        v in matrix(5, 2),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
        func in functions(),
    ) {
        let mask = SequenceMask::all_valid(5);
        let (a, w) = scaled_dot_product_attention(&q, &k, &v, &mask, func).unwrap();
        let pk = Tensor::from_rows(&perm.iter().map(|i| k.row(*i)).collect::<Vec<_>>());
        let pv = Tensor::from_rows(&perm.iter().map(|i| v.row(*i)).collect::<Vec<_>>());
        let (pa, pw) = scaled_dot_product_attention(&q, &pk, &pv, &mask, func).unwrap();
        prop_assert!(a.max_abs_diff(&pa) < 1e-10);
        for r in 0..3 {
            for (j, src) in perm.iter().enumerate() {
                prop_assert!((pw.at(r, j) - w.at(r, *src)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_without_positions_ignores_frame_order(
        seed in 0u64..1000,
        p1 in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
        p2 in Just((0..3).collect::<Vec<usize>>()).prop_shuffle(),
        func in functions(),
    ) {
        let cfg = ModelConfig {
            n_blocks: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 8,
            attention: func,
            aggregation: Pooling::Mean,
            pos_enc_first: false,
            pos_enc_second: false,
            n_classes: 3,
            audio_dim: 4,
            video_dim: 5,
            ..ModelConfig::default()
        };
        let mut rng = RandomSource::new(seed);
        let (model, ps) = init_params(&cfg, &mut rng).unwrap();
        let x1 = Tensor::new(&[4, 4], (0..16).map(|_| rng.normal()).collect()).unwrap();
        let x2 = Tensor::new(&[3, 5], (0..15).map(|_| rng.normal()).collect()).unwrap();
        let permute = |x: &Tensor, p: &[usize]| Tensor::from_rows(&p.iter().map(|i| x.row(*i)).collect::<Vec<_>>());
        let (m1, m2) = (SequenceMask::all_valid(4), SequenceMask::all_valid(3));
        let a = model.forward(&ps, &x1, &x2, &m1, &m2, &mut Mode::inference()).unwrap();
        let b = model
            .forward(&ps, &permute(&x1, &p1), &permute(&x2, &p2), &m1, &m2, &mut Mode::inference())
            .unwrap();
        for (x, y) in a.clip_probs.iter().zip(&b.clip_probs) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn micro_f1_matches_brute_force(pred in binary(6, 4), labels in binary(6, 4)) {
        let f = micro_f1(&pred, &labels).unwrap();
        prop_assert!((f - brute_f1(&pred, &labels)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&f));
    }

    #[test]
    fn raising_the_threshold_never_adds_positives(probs in matrix(5, 3), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let probs = probs.map(|x| 1.0 / (1.0 + (-x).exp()));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let low = apply_threshold(&probs, lo);
        let high = apply_threshold(&probs, hi);
        prop_assert!(high.data().iter().zip(low.data()).all(|(h, l)| h <= l));
    }

    #[test]
    fn calibration_picks_the_first_best_grid_point(probs in matrix(8, 3), labels in binary(8, 3)) {
        let probs = probs.map(|x| 1.0 / (1.0 + (-x).exp()));
        let grid = default_grid();
        let chosen = calibrate_threshold(&probs, &labels, &grid).unwrap();
        let scores: Vec<f64> = grid.iter().map(|t| brute_f1(&apply_threshold(&probs, *t), &labels)).collect();
        let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let first = grid[scores.iter().position(|s| *s == best).unwrap()];
        prop_assert_eq!(chosen, first);
    }

    #[test]
    fn sampler_bounds_class_ratios(
        counts in prop::collection::vec(1usize..40, 2..6),
        ratio in 1.0f64..8.0,
    ) {
        let n = counts.len();
        let mut labels = Vec::new();
        for (c, k) in counts.iter().enumerate() {
            for _ in 0..*k {
                let mut row = vec![0u8; n];
                row[c] = 1;
                labels.push(row);
            }
        }
        let s = build_balanced_sampler(&labels, ratio).unwrap();
        let max = s.class_probs.iter().cloned().fold(0.0, f64::max);
        let min = s.class_probs.iter().cloned().fold(1.0, f64::min);
        prop_assert!(max / min <= ratio + 1e-9);
        prop_assert!((s.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (c, k) in counts.iter().enumerate() {
            prop_assert_eq!(s.class_indices[c].len(), *k);
        }
    }

    #[test]
    fn embeddings_round_trip(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        let mut rng = RandomSource::new(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.normal() as f32).collect();
        let frames = FrameSeq::new(rows, cols, data).unwrap();
        let bytes = encode_embedding(&frames);
        prop_assert_eq!(bytes.len(), 16 + rows * cols * 4);
        prop_assert_eq!(decode_embedding(&bytes).unwrap(), frames.clone());
        prop_assert!(decode_embedding(&bytes[..bytes.len() - 1]).is_err());
    }
}
