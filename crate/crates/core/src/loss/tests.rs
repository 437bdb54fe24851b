use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{InitConfig, ModelConfig, SeqLens, UniAv};
use crate::nn::check_store_gradients;
use crate::task::TaskId;
use crate::tensor::gradcheck::rand_tensor;
use crate::tensor::Tensor;

fn geometry(len: usize, levels: usize) -> Vec<LevelGeometry> {
    let cfg = ModelConfig {
        fusion_layers: levels,
        regression_bounds: ModelConfig::octave_bounds(levels),
        max_seq_len: SeqLens::uniform(len),
        ..ModelConfig::desk()
    };
    pyramid_geometry(&cfg, len)
}

fn seg(start: f64, end: f64, class: usize) -> GridSegment {
    GridSegment { start, end, class }
}

#[test]
fn segment_thirteen_to_nineteen() {
    let geo = geometry(64, 6);
    let a = assign_targets(&[seg(13.0, 19.0, 0)], &geo, 64, 2).unwrap();
    let level1: Vec<f64> = (0..geo[0].len)
        .filter(|&t| a.levels[0].positive[t])
        .map(|t| geo[0].center(t))
        .collect();
    assert_eq!(level1, vec![13.0, 15.0, 17.0, 19.0]);
    for lv in &a.levels[1..] {
        assert!(lv.positive.iter().all(|&p| !p));
    }
    // centre 15: distances (2, 4) grid units, stride 2
    assert_eq!(a.levels[0].dists[7], [1.0, 2.0]);
}

#[test]
fn whole_video_segment_lands_on_coarse_levels() {
    let geo = geometry(64, 6);
    let a = assign_targets(&[seg(0.0, 64.0, 1)], &geo, 64, 2).unwrap();
    // every centre needs a reach between 32 and 64, which only level 4 admits
    let hit: Vec<usize> = (0..geo.len())
        .filter(|&l| a.levels[l].positive.iter().any(|&p| p))
        .map(|l| l + 1)
        .collect();
    assert_eq!(hit, vec![4]);
}

#[test]
fn zero_annotations_give_all_negative_targets() {
    let geo = geometry(32, 3);
    let a = assign_targets(&[], &geo, 32, 3).unwrap();
    assert_eq!(a.num_positive(), 0);
    assert!(a.levels.iter().all(|l| l.classes.iter().all(|&y| y == 0.0)));
}

#[test]
fn class_out_of_range_is_data_error() {
    let geo = geometry(32, 3);
    assert!(matches!(
        assign_targets(&[seg(1.0, 3.0, 3)], &geo, 32, 3),
        Err(Error::Data(_))
    ));
}

#[test]
fn grid_conversion_checks_bounds() {
    let ann = [Annotation {
        onset: 1.0,
        offset: 2.5,
        class: 0,
    }];
    assert_eq!(to_grid(&ann, 0.5, 8).unwrap(), vec![seg(2.0, 5.0, 0)]);
    assert!(matches!(to_grid(&ann, 0.25, 8), Err(Error::Data(_))));
    let backwards = [Annotation {
        onset: 2.0,
        offset: 1.0,
        class: 0,
    }];
    assert!(to_grid(&backwards, 0.5, 8).is_err());
}

/// Enumerate every (level, moment, segment) triple.
fn brute_force(segments: &[GridSegment], geo: &[LevelGeometry], valid_len: usize, n: usize) -> AssignmentTarget {
    let levels = geo
        .iter()
        .map(|g| {
            let mut lt = LevelTargets {
                len: g.len,
                num_classes: n,
                valid: vec![false; g.len],
                positive: vec![false; g.len],
                classes: vec![0.0; g.len * n],
                dists: vec![[0.0; 2]; g.len],
            };
            for t in 0..g.len {
                let s = g.stride as f64;
                let c = (t as f64 + 0.5) * s;
                lt.valid[t] = ((t * g.stride) as f64) < valid_len as f64;
                if !lt.valid[t] {
                    continue;
                }
                let mut hits: Vec<&GridSegment> = segments
                    .iter()
                    .filter(|a| {
                        let reach = (c - a.start).max(a.end - c);
                        a.start <= c && c <= a.end && g.range.0 <= reach && reach < g.range.1
                    })
                    .collect();
                if hits.is_empty() {
                    continue;
                }
                lt.positive[t] = true;
                for h in &hits {
                    lt.classes[t * n + h.class] = 1.0;
                }
                hits.sort_by(|a, b| {
                    let ka = (
                        (c - (a.start + a.end) / 2.0).abs(),
                        a.end - a.start,
                        a.start,
                        a.end,
                        a.class,
                    );
                    let kb = (
                        (c - (b.start + b.end) / 2.0).abs(),
                        b.end - b.start,
                        b.start,
                        b.end,
                        b.class,
                    );
                    ka.partial_cmp(&kb).unwrap()
                });
                lt.dists[t] = [(c - hits[0].start) / s, (hits[0].end - c) / s];
            }
            lt
        })
        .collect();
    AssignmentTarget { levels }
}

fn random_instance(rng: &mut ChaCha8Rng) -> (usize, usize, Vec<GridSegment>) {
    let len = [16, 32][rng.random_range(0..2)];
    let valid = rng.random_range(len / 2..=len);
    let k = rng.random_range(0..5);
    // half-step endpoints hit centres and range boundaries often
    let segs = (0..k)
        .map(|_| {
            let a = rng.random_range(0..=2 * len) as f64 / 2.0;
            let b = rng.random_range(0..=2 * len) as f64 / 2.0;
            seg(a.min(b), a.max(b), rng.random_range(0..3))
        })
        .collect();
    (len, valid, segs)
}

#[test]
fn assignment_matches_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let (len, valid, segs) = random_instance(&mut rng);
        let geo = geometry(len, 3);
        let fast = assign_targets(&segs, &geo, valid, 3).unwrap();
        assert_eq!(fast, brute_force(&segs, &geo, valid, 3), "{segs:?} valid {valid}");
    }
}

#[test]
fn assignment_ignores_annotation_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (len, valid, mut segs) = random_instance(&mut rng);
        let geo = geometry(len, 3);
        let a = assign_targets(&segs, &geo, valid, 3).unwrap();
        segs.reverse();
        assert_eq!(a, assign_targets(&segs, &geo, valid, 3).unwrap());
    }
}

#[test]
fn focal_loss_examples() {
    let l = sigmoid_focal_loss(&[0.9], &[1.0], 1, 0.25, 2.0);
    assert!((l - 0.25 * 0.01 * -(0.9f64).ln()).abs() < 1e-12);
    assert!((l - 2.634e-4).abs() < 1e-6);
    assert!(sigmoid_focal_loss(&[1.0], &[1.0], 1, 0.25, 2.0).abs() < 1e-12);

    // gamma = 0, alpha = 0.5: half binary cross-entropy
    let probs = [0.2, 0.7, 0.9, 0.4];
    let ys = [1.0, 0.0, 1.0, 0.0];
    let bce: f64 = probs
        .iter()
        .zip(&ys)
        .map(|(&p, &y): (&f64, &f64)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum();
    // 2 positive rows of width 2
    let l = sigmoid_focal_loss(&probs, &ys, 2, 0.5, 0.0);
    assert!((l - 0.5 * bce / 2.0).abs() < 1e-12);
}

#[test]
fn giou_loss_examples() {
    assert!((giou_loss_1d((0.0, 2.0), (4.0, 6.0)) - 4.0 / 3.0).abs() < 1e-12);
    assert!((giou_loss_1d((0.0, 4.0), (2.0, 6.0)) - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(giou_loss_1d((1.0, 3.0), (1.0, 3.0)), 0.0);
    assert_eq!(giou_loss_1d((2.0, 2.0), (2.0, 2.0)), 0.0);
}

proptest::proptest! {
    #[test]
    fn focal_loss_is_non_negative(p in 0.0f64..=1.0, y in 0u8..2, gamma in 0.0f64..4.0) {
        proptest::prop_assert!(sigmoid_focal_loss(&[p], &[y as f64], 1, 0.25, gamma) >= 0.0);
    }

    #[test]
    fn giou_is_bounded(a in 0.0f64..10.0, la in 0.0f64..5.0, b in 0.0f64..10.0, lb in 0.0f64..5.0) {
        let g = crate::segment::giou((a, a + la), (b, b + lb));
        proptest::prop_assert!((-1.0..=1.0).contains(&g));
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        input_dim_visual: 4,
        input_dim_audio: 3,
        text_dim: 5,
        d_model: 8,
        d_embed: 8,
        unimodal_layers: 1,
        fusion_layers: 2,
        heads: 2,
        ffn_ratio: 2,
        max_seq_len: SeqLens::uniform(16),
        regression_bounds: vec![8.0],
        // gradient checks need every path live
        init: InitConfig::xavier(),
        ..ModelConfig::full_scale()
    }
}

struct Item {
    visual: Tensor<f64>,
    audio: Tensor<f64>,
    text: Tensor<f64>,
    target: AssignmentTarget,
}

fn tiny_items(cfg: &ModelConfig) -> Vec<(TaskId, Item)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let geo = pyramid_geometry(cfg, 16);
    let segs = [seg(2.0, 7.0, 0), seg(5.0, 15.0, 1), seg(9.0, 10.0, 1)];
    TaskId::ALL
        .into_iter()
        .map(|task| {
            let item = Item {
                visual: rand_tensor(&[16, 4], &mut rng),
                audio: rand_tensor(&[16, 3], &mut rng),
                text: rand_tensor(&[2, 5], &mut rng),
                target: assign_targets(&segs, &geo, 14, 2).unwrap(),
            };
            (task, item)
        })
        .collect()
}

fn total_loss(
    model: &UniAv<f64>,
    store: &crate::nn::ParamStore<f64>,
    items: &[(TaskId, Item)],
) -> Result<(f64, crate::nn::Grads<f64>)> {
    let mut g = Graph::new(store);
    let norm = items.iter().map(|(_, i)| i.target.num_positive()).sum::<usize>() as f64;
    let mut parts = Vec::new();
    for (task, item) in items {
        let v = g.input(item.visual.clone());
        let a = g.input(item.audio.clone());
        let t = g.input(item.text.clone());
        let out = model.forward(&mut g, v, a, *task, t)?;
        parts.push(item_loss(&mut g, &out, &item.target, &LossConfig::default(), norm)?.total);
    }
    let loss = sum_all(&mut g, &parts)?;
    let value = g.value(loss).item();
    Ok((value, g.backward(loss)?))
}

#[test]
fn end_to_end_tiny_model_gradients() {
    let cfg = tiny_config();
    let model = UniAv::<f64>::new(cfg.clone(), 5).unwrap();
    let items = tiny_items(&cfg);
    assert!(items[0].1.target.num_positive() > 0);
    let (err, name) = check_store_gradients(&model.params, 1e-5, |store| total_loss(&model, store, &items)).unwrap();
    assert!(err < 1e-5, "worst relative error {err:e} at {name}");
}

#[test]
fn zero_positives_leave_only_classification() {
    let cfg = tiny_config();
    let model = UniAv::<f64>::new(cfg.clone(), 5).unwrap();
    let mut items = tiny_items(&cfg);
    items.truncate(1);
    items[0].1.target = assign_targets(&[], &pyramid_geometry(&cfg, 16), 16, 2).unwrap();
    let item = &items[0].1;
    let mut g = Graph::new(&model.params);
    let (v, a, t) = (
        g.input(item.visual.clone()),
        g.input(item.audio.clone()),
        g.input(item.text.clone()),
    );
    let out = model.forward(&mut g, v, a, TaskId::Tal, t).unwrap();
    let parts = item_loss(&mut g, &out, &item.target, &LossConfig::default(), 0.0).unwrap();
    assert_eq!(g.value(parts.reg).item(), 0.0);
    assert_eq!(g.value(parts.total).item(), g.value(parts.cls).item());
}

#[test]
fn perfect_predictions_have_zero_loss() {
    let geo = geometry(16, 2);
    let target = assign_targets(&[seg(2.0, 7.0, 0)], &geo, 16, 2).unwrap();
    let store = crate::nn::ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let outputs: Vec<LevelOutput> = target
        .levels
        .iter()
        .zip(&geo)
        .map(|(lt, gm)| {
            let probs = Tensor::new(&[lt.len, 2], lt.classes.clone()).unwrap();
            let dists = Tensor::new(&[lt.len, 2], lt.dists.iter().flatten().copied().collect()).unwrap();
            LevelOutput {
                probs: g.input(probs),
                dists: g.input(dists),
                stride: gm.stride,
            }
        })
        .collect();
    let parts = item_loss(&mut g, &outputs, &target, &LossConfig::default(), 1.0).unwrap();
    assert!(g.value(parts.total).item().abs() < 1e-12);
}
