use mvsa_core::attention::{attention_weights, MaskMode};
use mvsa_core::masks::ClsPolicy;
use mvsa_core::numerics::{grad_check, GradCheckOptions, ParamStore, Rng, Tape, Tensor};
use mvsa_core::transformer::{ModelConfig, Variant};
use mvsa_core::variants::SpeakerModel;

fn features(seed: u64, b: usize, t: usize, f: usize) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(&[b, t, f], |_| rng.normal())
}

fn embed(model: &SpeakerModel, x: &Tensor) -> Tensor {
    let mut tape = Tape::new(&model.store);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, xv, None).unwrap();
    tape.value(out.embedding).clone()
}

#[test]
fn every_variant_has_the_declared_shapes() {
    for v in Variant::ALL {
        let cfg = ModelConfig::toy(v);
        let model = SpeakerModel::new(cfg.clone(), 1).unwrap();
        let mut tape = Tape::new(&model.store);
        let x = tape.constant(features(2, 3, 20, cfg.feature_dim));
        let out = model.forward(&mut tape, x, None).unwrap();
        assert_eq!(tape.shape(out.embedding), &[3, cfg.embedding_dim], "variant {}", v.letter());
        assert_eq!(tape.shape(out.logits), &[3, cfg.n_speakers]);
    }
}

#[test]
fn every_variant_loss_passes_gradient_check() {
    for v in Variant::ALL {
        let cfg = ModelConfig::toy(v);
        let model = SpeakerModel::new(cfg.clone(), 3).unwrap();
        let x = features(4, 2, 12, cfg.feature_dim);
        let report = grad_check(
            &model.store,
            |tape| {
                let xv = tape.constant(x.clone());
                let out = model.forward(tape, xv, None)?;
                tape.cross_entropy(out.logits, &[0, 2])
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "variant {}: {report:?}", v.letter());
    }
}

#[test]
fn embedding_head_at_full_width_is_512_wide() {
    // Shape contract at full widths, shallow stacks to keep the test quick.
    for v in [Variant::FirstDecoderToken, Variant::PoolingEncoderTokens] {
        let cfg = ModelConfig {
            n_encoder_layers: 1,
            n_decoder_layers: 1,
            n_speakers: 1251,
            variant: v,
            ..ModelConfig::full()
        };
        let model = SpeakerModel::new(cfg, 0).unwrap();
        let mut tape = Tape::new(&model.store);
        let x = tape.constant(features(1, 1, 8, 80));
        let out = model.forward(&mut tape, x, None).unwrap();
        assert_eq!(tape.shape(out.embedding), &[1, 512]);
        assert_eq!(tape.shape(out.logits), &[1, 1251]);
    }
}

#[test]
fn variant_a_without_cross_attention_ignores_audio() {
    let cfg = ModelConfig::toy(Variant::FirstDecoderToken);
    let mut model = SpeakerModel::new(cfg.clone(), 5).unwrap();
    let (x1, x2) = (features(6, 1, 16, 6), features(7, 1, 16, 6));
    assert_ne!(embed(&model, &x1), embed(&model, &x2));
    let layers = model.decoder().unwrap().layers.clone();
    for layer in layers {
        let a = layer.cross_attn;
        for lin in [a.query, a.key, a.value, a.output] {
            for id in [lin.weight, lin.bias] {
                let shape = model.store.value(id).shape().to_vec();
                model.store.get_mut(id).value = Tensor::zeros(&shape);
            }
        }
    }
    assert_eq!(embed(&model, &x1), embed(&model, &x2));
}

#[test]
fn variant_b_decodes_h_then_cls_and_sees_every_frame() {
    let cfg = ModelConfig::toy(Variant::LastDecoderToken);
    let model = SpeakerModel::new(cfg.clone(), 8).unwrap();
    let x = features(9, 1, 16, 6);
    let mut tape = Tape::new(&model.store);
    let xv = tape.constant(x.clone());
    let h = model.prenet(&mut tape, xv, None).unwrap();
    let target = model.decoder_target(&mut tape, h).unwrap();
    assert_eq!(tape.shape(target), &[1, h.n_steps + 1, 16]);
    let base = embed(&model, &x);
    for t in 0..16 {
        let mut y = x.clone();
        y.set(&[0, t, 2], x.at(&[0, t, 2]) + 0.25);
        assert_ne!(embed(&model, &y), base, "frame {t}");
    }
}

#[test]
fn variant_c_is_the_mean_of_encoder_outputs() {
    let cfg = ModelConfig::toy(Variant::AverageEncoderTokens);
    let model = SpeakerModel::new(cfg.clone(), 10).unwrap();
    let x = features(11, 2, 20, 6);
    let mut tape = Tape::new(&model.store);
    let xv = tape.constant(x.clone());
    let h = model.prenet(&mut tape, xv, None).unwrap();
    let enc = model.encode(&mut tape, h, None, None).unwrap();
    let tokens = tape.value(enc.tokens).clone();
    let emb = embed(&model, &x);
    let n = enc.n_steps;
    for b in 0..2 {
        for j in 0..16 {
            let mean = (0..n).map(|t| tokens.at(&[b, t, j])).sum::<f64>() / n as f64;
            assert!((emb.at(&[b, j]) - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn mean_pooling_is_permutation_invariant_and_fixes_constants() {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let c = Tensor::from_fn(&[1, 4, 3], |i| [0.5, -2.0, 7.0][i % 3]);
    let cv = tape.constant(c);
    let m = tape.mean_axis(cv, 1).unwrap();
    assert_eq!(tape.value(m).data(), &[0.5, -2.0, 7.0]);
    let x = features(12, 1, 6, 3);
    let mut p = x.clone();
    for (dst, src) in [0, 5, 2, 4, 1, 3].iter().enumerate() {
        for j in 0..3 {
            p.set(&[0, dst, j], x.at(&[0, *src, j]));
        }
    }
    let (xv, pv) = (tape.constant(x), tape.constant(p));
    let (a, b) = (tape.mean_axis(xv, 1).unwrap(), tape.mean_axis(pv, 1).unwrap());
    assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-15);
}

fn variant_d(policy: ClsPolicy, windows: Vec<usize>) -> SpeakerModel {
    let cfg = ModelConfig {
        n_encoder_layers: 1,
        mask_mode: MaskMode::PreSoftmax,
        cls_policy: policy,
        layer_windows: vec![windows],
        ..ModelConfig::toy(Variant::FirstEncoderToken)
    };
    SpeakerModel::new(cfg, 13).unwrap()
}

#[test]
fn variant_d_prepends_cls() {
    let model = variant_d(ClsPolicy::Windowed, vec![1, 3]);
    let mut tape = Tape::new(&model.store);
    let xv = tape.constant(features(14, 2, 16, 6));
    let h = model.prenet(&mut tape, xv, None).unwrap();
    let (seq, cls) = model.encoder_input(&mut tape, h).unwrap();
    assert_eq!((seq.n_steps, cls), (h.n_steps + 1, Some(0)));
    assert_eq!(tape.shape(seq.tokens), &[2, h.n_steps + 1, 16]);
}

#[test]
fn variant_d_self_only_head_keeps_cls_to_itself() {
    let model = variant_d(ClsPolicy::Windowed, vec![1, 3]);
    let mut tape = Tape::new(&model.store);
    let xv = tape.constant(features(15, 1, 16, 6));
    let h = model.prenet(&mut tape, xv, None).unwrap();
    let (seq, cls) = model.encoder_input(&mut tape, h).unwrap();
    let masks = model.config.encoder_masks(seq.n_steps, cls).unwrap();
    let p = model.encoder().layers[0].self_attn;
    let q = p.query.forward(&mut tape, seq.tokens).unwrap();
    let k = p.key.forward(&mut tape, seq.tokens).unwrap();
    let n = seq.n_steps;
    let split = |tape: &mut Tape<'_>, v| {
        let r = tape.reshape(v, &[1, n, 2, 8]).unwrap();
        tape.permute(r, &[0, 2, 1, 3]).unwrap()
    };
    let (q, k) = (split(&mut tape, q), split(&mut tape, k));
    let w = attention_weights(&mut tape, q, k, Some(&masks[0]), MaskMode::PreSoftmax).unwrap();
    // Head 0, row 0 (the [CLS] query): all weight on itself.
    assert_eq!(w[0], 1.0);
    assert!(w[1..n].iter().all(|&v| v == 0.0));
}

#[test]
fn variant_d_cls_policy_controls_reach() {
    let x = features(16, 1, 16, 6);
    let mut y = x.clone();
    for j in 0..6 {
        y.set(&[0, 15, j], x.at(&[0, 15, j]) + 1.0);
    }
    // Every head self-only: the [CLS] output cannot see the last frame.
    let local = variant_d(ClsPolicy::Windowed, vec![1, 1]);
    assert_eq!(embed(&local, &x), embed(&local, &y));
    let global = variant_d(ClsPolicy::Global, vec![1, 1]);
    assert_ne!(embed(&global, &x), embed(&global, &y));
}

#[test]
fn variant_e_pools_to_twice_the_model_width() {
    let cfg = ModelConfig::toy(Variant::PoolingEncoderTokens);
    let model = SpeakerModel::new(cfg, 17).unwrap();
    let hidden1 = model.store.id("head.hidden1.weight").unwrap();
    assert_eq!(model.store.value(hidden1).shape(), &[32, 16]);
}

#[test]
fn zero_classifier_gives_uniform_posterior() {
    let cfg = ModelConfig::toy(Variant::PoolingEncoderTokens);
    let mut model = SpeakerModel::new(cfg, 18).unwrap();
    let c = model.classifier();
    model.store.get_mut(c.weight).value = Tensor::zeros(&[16, 3]);
    let x = features(19, 2, 12, 6);
    let mut tape = Tape::new(&model.store);
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, xv, None).unwrap();
    let p = tape.softmax(out.logits).unwrap();
    assert!(tape.value(p).data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
}

#[test]
fn argmax_ignores_a_constant_logit_shift() {
    use mvsa_core::evaluation::argmax;
    let cfg = ModelConfig::toy(Variant::AverageEncoderTokens);
    let model = SpeakerModel::new(cfg, 20).unwrap();
    let x = features(21, 4, 12, 6);
    let mut tape = Tape::new(&model.store);
    let xv = tape.constant(x);
    let out = model.forward(&mut tape, xv, None).unwrap();
    let l = tape.value(out.logits).clone();
    let shifted = l.map(|v| v + 123.0);
    for b in 0..4 {
        assert_eq!(argmax(l.row(b)), argmax(shifted.row(b)));
    }
}

#[test]
fn embed_reports_the_utterance() {
    use mvsa_core::features::FeatureMatrix;
    let cfg = ModelConfig::toy(Variant::PoolingEncoderTokens);
    let model = SpeakerModel::new(cfg, 22).unwrap();
    let f = FeatureMatrix::new(
        Tensor::from_fn(&[10, 6], |i| (i as f64 * 0.37).sin()),
        "utt-1",
        "spk",
    )
    .unwrap();
    let e = model.embed(&f).unwrap();
    assert_eq!(e.utterance_id, "utt-1");
    assert_eq!(e.vector.len(), 16);
    assert!(e.vector.iter().all(|v| v.is_finite()));
}
