use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::gradcheck::rand_tensor;

fn small(fusion_layers: usize, len: usize) -> ModelConfig {
    ModelConfig {
        input_dim_visual: 6,
        input_dim_audio: 5,
        text_dim: 7,
        d_model: 8,
        d_embed: 8,
        unimodal_layers: 1,
        fusion_layers,
        heads: 2,
        ffn_ratio: 2,
        max_seq_len: SeqLens::uniform(len),
        regression_bounds: ModelConfig::octave_bounds(fusion_layers),
        // gradient checks need every path live
        init: InitConfig::xavier(),
        ..ModelConfig::full_scale()
    }
}

fn inputs(cfg: &ModelConfig, len: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        rand_tensor(&[len, cfg.input_dim_visual], &mut rng),
        rand_tensor(&[len, cfg.input_dim_audio], &mut rng),
        rand_tensor(&[3, cfg.text_dim], &mut rng),
    )
}

#[test]
fn pyramid_shape_law() {
    for len in [64, 128, 256] {
        let cfg = small(6, len);
        let model = UniAv::<f32>::new(cfg.clone(), 1).unwrap();
        let (v, a, _) = inputs(&cfg, len, 2);
        let mut g = Graph::inference(&model.params);
        let v = g.input(v.cast());
        let a = g.input(a.cast());
        let p = model.encode(&mut g, v, a, TaskId::Tal).unwrap();
        assert_eq!(p.levels.len(), 6);
        for (i, lv) in p.levels.iter().enumerate() {
            let l = i + 1;
            assert_eq!(g.shape(lv.features), &[len >> l, 16]);
            assert_eq!(lv.stride, 1 << l);
        }
    }
}

#[test]
fn encode_rejects_bad_lengths() {
    let cfg = small(2, 16);
    let model = UniAv::<f64>::new(cfg.clone(), 1).unwrap();
    let (v, a, _) = inputs(&cfg, 16, 2);
    let mut g = Graph::inference(&model.params);
    let short = g.input(a.pad_or_crop_rows(12).unwrap());
    let vv = g.input(v.clone());
    assert!(matches!(
        model.encode(&mut g, vv, short, TaskId::Tal),
        Err(Error::Input(_))
    ));
    let v12 = g.input(v.pad_or_crop_rows(12).unwrap());
    assert!(matches!(
        model.encode(&mut g, v12, short, TaskId::Tal),
        Err(Error::Input(_))
    ));
}

fn identity_head_model() -> UniAv<f64> {
    let cfg = ModelConfig {
        d_model: 2,
        d_embed: 4,
        text_dim: 4,
        heads: 1,
        ..small(1, 2)
    };
    let mut m = UniAv::<f64>::new(cfg, 0).unwrap();
    let head = m.classifier().clone();
    *m.params.get_mut(head.feature_proj.weight) = Tensor::eye(4);
    *m.params.get_mut(head.text_proj.weight) = Tensor::eye(4);
    m
}

fn head_probs(m: &UniAv<f64>, feats: &[Vec<f64>], text: &[Vec<f64>]) -> Vec<f64> {
    let mut g = Graph::inference(&m.params);
    let z = g.input(Tensor::from_rows(feats).unwrap());
    let t = g.input(Tensor::from_rows(text).unwrap());
    let p = Pyramid {
        levels: vec![PyramidLevel { features: z, stride: 2 }],
    };
    let probs = m.classify(&mut g, &p, t).unwrap();
    g.value(probs[0]).to_f64_vec()
}

#[test]
fn classifier_matching_and_orthogonal_vectors() {
    let m = identity_head_model();
    let text = vec![vec![0.6, 0.8, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.0]];
    let probs = head_probs(&m, &[vec![3.0, 4.0, 0.0, 0.0]], &text);
    // cos = 1 against class 0, 0 against class 1
    let expect = 1.0 / (1.0 + (-10.0f64).exp());
    assert!((probs[0] - expect).abs() < 1e-12);
    assert!((probs[0] - 0.99995).abs() < 1e-5);
    assert!((probs[1] - 0.5).abs() < 1e-12);
}

#[test]
fn classifier_monotone_in_cosine() {
    let m = identity_head_model();
    let text = vec![vec![1.0, 0.0, 0.0, 0.0]];
    let feats: Vec<Vec<f64>> = (0..=8)
        .map(|i| {
            let a = std::f64::consts::PI * i as f64 / 8.0;
            vec![a.cos(), a.sin(), 0.0, 0.0]
        })
        .collect();
    let probs = head_probs(&m, &feats, &text);
    assert!(probs.windows(2).all(|w| w[0] > w[1]));
}

#[test]
fn empty_vocabulary_is_config_error() {
    let m = identity_head_model();
    let mut g = Graph::inference(&m.params);
    let z = g.input(Tensor::zeros(&[1, 4]));
    let t = g.input(Tensor::zeros(&[0, 4]));
    let p = Pyramid {
        levels: vec![PyramidLevel { features: z, stride: 2 }],
    };
    assert!(matches!(m.classify(&mut g, &p, t), Err(Error::Config(_))));
}

#[test]
fn logits_bounded_by_scale() {
    let cfg = small(3, 32);
    let model = UniAv::<f64>::new(cfg.clone(), 4).unwrap();
    let (v, a, t) = inputs(&cfg, 32, 5);
    let mut g = Graph::inference(&model.params);
    let (v, a, t) = (g.input(v), g.input(a), g.input(t));
    let p = model.encode(&mut g, v, a, TaskId::Sed).unwrap();
    let logits = model.classifier().logits(&mut g, &p, t).unwrap();
    let sigma = model.params.get(model.classifier().scale).item();
    for l in logits {
        assert!(g.value(l).data().iter().all(|x| x.abs() <= sigma + 1e-12));
    }
}

#[test]
fn regression_segment_rule() {
    assert_eq!(decode_segment(3, 2, 0.0, 0.0), (7.0, 7.0));
    assert_eq!(decode_segment(3, 2, 1.0, 2.0), (5.0, 11.0));
}

#[test]
fn forward_outputs_non_negative_and_deterministic() {
    let cfg = small(3, 32);
    let model = UniAv::<f32>::new(cfg.clone(), 8).unwrap();
    let (v, a, t) = inputs(&cfg, 32, 9);
    let (v, a, t) = (v.cast(), a.cast(), t.cast());
    for task in TaskId::ALL {
        let first = model.predict(&v, &a, task, &t).unwrap();
        let again = model.predict(&v, &a, task, &t).unwrap();
        assert_eq!(first, again);
        assert_eq!(first.len(), 3);
        for (i, lv) in first.iter().enumerate() {
            assert_eq!(lv.probs.shape(), &[32 >> (i + 1), 3]);
            assert_eq!(lv.dists.shape(), &[32 >> (i + 1), 2]);
            assert!(lv.dists.data().iter().all(|&d| d >= 0.0));
            assert!(lv.probs.data().iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }
}

/// Copy every TAL-specific tensor onto the other tasks' slots.
pub(crate) fn tie_task_parameters<S: Scalar>(model: &mut UniAv<S>) {
    let names: Vec<String> = model
        .params
        .iter()
        .map(|(_, n, _)| n.to_string())
        .filter(|n| n.contains(".expert.tal.") || n.starts_with("head.reg.last.tal."))
        .collect();
    for n in names {
        let src = model.params.get(model.params.id(&n).unwrap()).clone();
        for other in ["avel", "sed"] {
            let target = n.replace(".tal.", &format!(".{other}."));
            let id = model.params.id(&target).unwrap();
            *model.params.get_mut(id) = src.clone();
        }
    }
}

#[test]
fn tied_task_parameters_make_outputs_task_invariant() {
    let cfg = small(3, 32);
    let mut model = UniAv::<f32>::new(cfg.clone(), 8).unwrap();
    tie_task_parameters(&mut model);
    let (v, a, t) = inputs(&cfg, 32, 9);
    let (v, a, t) = (v.cast(), a.cast(), t.cast());
    let tal = model.predict(&v, &a, TaskId::Tal, &t).unwrap();
    assert_eq!(tal, model.predict(&v, &a, TaskId::Avel, &t).unwrap());
    assert_eq!(tal, model.predict(&v, &a, TaskId::Sed, &t).unwrap());
}

#[test]
fn cross_attention_queries_with_the_other_modality() {
    // audio stream of the first fusion block: visual enters only as the query,
    // so freezing the query path makes the audio output blind to visual input
    let cfg = small(1, 8);
    let mut model = UniAv::<f64>::new(cfg.clone(), 3).unwrap();
    let (v, a, t) = inputs(&cfg, 8, 1);
    let mut v2 = v.clone();
    v2.data_mut().iter_mut().for_each(|x| *x = -*x * 0.5);

    let audio_half = |m: &UniAv<f64>, v: &Tensor<f64>| {
        let mut g = Graph::inference(&m.params);
        let (vv, aa, _) = (g.input(v.clone()), g.input(a.clone()), g.input(t.clone()));
        let p = m.encode(&mut g, vv, aa, TaskId::Avel).unwrap();
        let z = g.value(p.levels[0].features).clone();
        let (rows, cols) = z.dims2().unwrap();
        (0..rows)
            .flat_map(|r| z.row(r)[cols / 2..].to_vec())
            .collect::<Vec<f64>>()
    };
    assert_ne!(audio_half(&model, &v), audio_half(&model, &v2));

    for n in ["fusion.1.audio.attn.q.weight", "fusion.1.audio.attn.q.bias"] {
        let id = model.params.id(n).unwrap();
        model.params.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }
    assert_eq!(audio_half(&model, &v), audio_half(&model, &v2));
}

#[test]
fn single_task_model_is_smaller() {
    let at = UniAv::<f32>::new(small(3, 32), 0).unwrap();
    let st = UniAv::<f32>::new(small(3, 32).with_tasks(&[TaskId::Sed]), 0).unwrap();
    assert!(st.num_params() < at.num_params());
    assert!(st
        .params
        .iter()
        .all(|(_, n, _)| !n.contains(".tal") && !n.contains(".avel")));
}

#[test]
fn default_init_starts_blocks_as_identity() {
    let cfg = ModelConfig {
        init: InitConfig::default(),
        ..small(2, 16)
    };
    let plain = UniAv::<f64>::new(small(2, 16), 5).unwrap();
    let model = UniAv::<f64>::new(cfg, 5).unwrap();
    let (mut zeroed, mut averaged, mut scaled) = (0, 0, 0);
    for ((_, name, t), (_, _, p)) in model.params.iter().zip(plain.params.iter()) {
        if name.ends_with(".attn.out.weight") || name.ends_with(".fc2.weight") {
            assert!(t.data().iter().all(|&x| x == 0.0), "{name}");
            zeroed += 1;
        } else if name.ends_with(".down.weight") {
            assert!(t.data().iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15), "{name}");
            averaged += 1;
        } else if name.starts_with("input.") && name.ends_with(".proj.weight") {
            assert!(t.data().iter().zip(p.data()).all(|(a, b)| (a - 0.01 * b).abs() < 1e-15));
            scaled += 1;
        }
    }
    // 2 unimodal + 4 fusion blocks, each with one attention and three experts
    assert_eq!(zeroed, 6 * 4);
    assert_eq!(averaged, 4);
    assert_eq!(scaled, 2);
}
