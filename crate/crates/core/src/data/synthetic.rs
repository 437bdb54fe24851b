//! Seeded synthetic audio-visual event data.
//!
//! Every class owns a fixed unit signature per modality. An event adds its
//! class signature, scaled by `magnitude`, to the rows it covers: the visual
//! stream only for actions, the audio stream only for sound events, and both
//! for audio-visual events. Gaussian noise covers every unpadded row.
//!
//! Class text embeddings mix a label component, shared by any task that uses
//! the same label, with a per-task prompt component.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassEntry, Dataset, Split, TextEmbeddingTable, VideoItem, Vocabulary};
use crate::error::{Error, Result};
use crate::loss::Annotation;
use crate::task::TaskId;
use crate::tensor::Tensor;

const LABELS_TAL: [&str; 8] = [
    "long jump",
    "pole vault",
    "surfing",
    "rock climbing",
    "juggling",
    "skateboarding",
    "archery",
    "rowing",
];
const LABELS_AVEL: [&str; 8] = [
    "dog barking",
    "church bell ringing",
    "playing violin",
    "helicopter flying",
    "chainsaw cutting",
    "baby crying",
    "car horn",
    "frying food",
];
const LABELS_SED: [&str; 8] = [
    "speech",
    "alarm bell",
    "running water",
    "vacuum cleaner",
    "cat meowing",
    "dishes clattering",
    "blender",
    "electric shaver",
];

/// Weights of the label and prompt parts of a class text embedding.
const LABEL_WEIGHT: f64 = 0.9;
const PROMPT_WEIGHT: f64 = 0.435_889_894_354_067_4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub tasks: Vec<TaskId>,
    pub classes_per_task: usize,
    pub videos_per_task: usize,
    /// Fraction of each task's videos held out for validation.
    pub val_fraction: f64,
    pub seq_len: usize,
    /// Shortest unpadded length; each video draws its length from
    /// `[min_valid_len, seq_len]`.
    pub min_valid_len: usize,
    pub feature_dim: usize,
    pub text_dim: usize,
    pub events_per_video: (usize, usize),
    /// Event length range in feature steps, inclusive.
    pub event_len: (usize, usize),
    pub magnitude: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            tasks: TaskId::ALL.to_vec(),
            classes_per_task: 5,
            videos_per_task: 250,
            val_fraction: 0.2,
            seq_len: 64,
            min_valid_len: 48,
            feature_dim: 32,
            text_dim: 32,
            events_per_video: (1, 3),
            event_len: (4, 16),
            magnitude: 3.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tasks.is_empty() || self.classes_per_task == 0 {
            return fail("synthetic data needs at least one task and class".into());
        }
        if self.classes_per_task > LABELS_TAL.len() {
            return fail(format!("at most {} classes per task", LABELS_TAL.len()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return fail(format!("val_fraction {} must be in [0, 1)", self.val_fraction));
        }
        if self.min_valid_len == 0 || self.min_valid_len > self.seq_len {
            return fail(format!(
                "min_valid_len {} must be in [1, seq_len {}]",
                self.min_valid_len, self.seq_len
            ));
        }
        let (lo, hi) = self.event_len;
        if lo == 0 || lo > hi {
            return fail(format!("bad event length range {:?}", self.event_len));
        }
        let (emin, emax) = self.events_per_video;
        if emin > emax {
            return fail(format!("bad events-per-video range {:?}", self.events_per_video));
        }
        if emax * hi > self.min_valid_len {
            return fail(format!(
                "{emax} events of up to {hi} steps do not fit in a video of {} steps",
                self.min_valid_len
            ));
        }
        if self.feature_dim == 0 || self.text_dim == 0 || self.noise < 0.0 {
            return fail("feature and text widths must be positive, noise non-negative".into());
        }
        Ok(())
    }

    pub fn num_val(&self) -> usize {
        (self.videos_per_task as f64 * self.val_fraction).round() as usize
    }
}

/// Fixed label pool of a task; pools are disjoint across tasks.
pub fn label_pool(task: TaskId) -> &'static [&'static str] {
    match task {
        TaskId::Tal => &LABELS_TAL,
        TaskId::Avel => &LABELS_AVEL,
        TaskId::Sed => &LABELS_SED,
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub vocab: Vocabulary,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

fn unit_vector(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Deterministic unit vector derived from a string.
fn string_vector(s: &str, dim: usize) -> Vec<f64> {
    unit_vector(dim, &mut ChaCha8Rng::seed_from_u64(fnv1a(s)))
}

/// Text embedding of `label` wrapped in `prompt`'s template.
pub fn label_vector(label: &str, prompt: TaskId, dim: usize) -> Vec<f32> {
    let l = string_vector(&format!("label:{label}"), dim);
    let p = string_vector(&format!("prompt:{}", prompt.prompt_template()), dim);
    let mixed: Vec<f64> = l
        .iter()
        .zip(&p)
        .map(|(a, b)| LABEL_WEIGHT * a + PROMPT_WEIGHT * b)
        .collect();
    let n = mixed.iter().map(|x| x * x).sum::<f64>().sqrt();
    mixed.into_iter().map(|x| (x / n) as f32).collect()
}

struct ClassSignature {
    visual: Option<Vec<f64>>,
    audio: Option<Vec<f64>>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vocab = Vocabulary::default();
    let mut videos = Vec::new();
    for &task in &spec.tasks {
        let names = &label_pool(task)[..spec.classes_per_task];
        let table = TextEmbeddingTable::new(
            spec.text_dim,
            names
                .iter()
                .map(|n| ClassEntry {
                    name: n.to_string(),
                    prompt: task,
                    embedding: label_vector(n, task, spec.text_dim),
                })
                .collect(),
        )?;
        vocab.tasks.insert(task, table);

        let signatures: Vec<ClassSignature> = (0..spec.classes_per_task)
            .map(|_| {
                let v = unit_vector(spec.feature_dim, &mut rng);
                let a = unit_vector(spec.feature_dim, &mut rng);
                ClassSignature {
                    visual: (task != TaskId::Sed).then_some(v),
                    audio: (task != TaskId::Tal).then_some(a),
                }
            })
            .collect();
        let n_val = spec.num_val();
        for i in 0..spec.videos_per_task {
            let split = if i < spec.videos_per_task - n_val {
                Split::Train
            } else {
                Split::Val
            };
            videos.push(video(spec, task, i, split, &signatures, &mut rng));
        }
    }
    Ok(SyntheticData {
        dataset: Dataset { videos },
        vocab,
    })
}

fn video(
    spec: &SyntheticSpec,
    task: TaskId,
    index: usize,
    split: Split,
    signatures: &[ClassSignature],
    rng: &mut ChaCha8Rng,
) -> VideoItem {
    let d = spec.feature_dim;
    let valid_len = rng.random_range(spec.min_valid_len..=spec.seq_len);
    let count = rng.random_range(spec.events_per_video.0..=spec.events_per_video.1);

    // non-overlapping events: draw lengths, then spread the free steps
    // randomly over the gaps around them
    let lens: Vec<usize> = (0..count)
        .map(|_| rng.random_range(spec.event_len.0..=spec.event_len.1))
        .collect();
    let free = valid_len - lens.iter().sum::<usize>();
    let mut cuts: Vec<usize> = (0..count).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut events = Vec::with_capacity(count);
    let mut used = 0;
    for (k, &len) in lens.iter().enumerate() {
        let start = cuts[k] + used;
        used += len;
        events.push((start, len, rng.random_range(0..signatures.len())));
    }

    let mut visual = vec![0f32; spec.seq_len * d];
    let mut audio = vec![0f32; spec.seq_len * d];
    for row in 0..valid_len {
        for buf in [&mut visual, &mut audio] {
            for x in &mut buf[row * d..(row + 1) * d] {
                let z: f64 = StandardNormal.sample(rng);
                *x = (spec.noise * z) as f32;
            }
        }
    }
    let mut annotations = Vec::with_capacity(count);
    let stride_sec = task.default_stride_sec();
    for &(start, len, class) in &events {
        let sig = &signatures[class];
        for (buf, s) in [(&mut visual, &sig.visual), (&mut audio, &sig.audio)] {
            let Some(s) = s else { continue };
            for row in start..start + len {
                for (x, &v) in buf[row * d..(row + 1) * d].iter_mut().zip(s) {
                    *x += (spec.magnitude * v) as f32;
                }
            }
        }
        annotations.push(Annotation {
            onset: start as f64 * stride_sec,
            offset: (start + len) as f64 * stride_sec,
            class,
        });
    }
    VideoItem {
        id: format!("{}_{index:04}", task.name()),
        task,
        split,
        duration: valid_len as f64 * stride_sec,
        stride_sec,
        visual: Tensor::new(&[spec.seq_len, d], visual).expect("sized buffer"),
        audio: Tensor::new(&[spec.seq_len, d], audio).expect("sized buffer"),
        annotations,
        valid_len,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            videos_per_task: 40,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn splits_lengths_and_padding() {
        let data = generate_synthetic(&small()).unwrap();
        for task in TaskId::ALL {
            assert_eq!(data.dataset.count(task, Split::Train), 32);
            assert_eq!(data.dataset.count(task, Split::Val), 8);
        }
        for v in &data.dataset.videos {
            assert!((48..=64).contains(&v.valid_len));
            assert!((1..=3).contains(&v.annotations.len()));
            for r in v.valid_len..64 {
                assert!(v.visual.row(r).iter().chain(v.audio.row(r)).all(|&x| x == 0.0));
            }
            let mut spans: Vec<(f64, f64)> = v.annotations.iter().map(|a| (a.onset, a.offset)).collect();
            spans.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert!(spans.windows(2).all(|w| w[0].1 <= w[1].0));
            assert!(spans.iter().all(|s| s.1 <= v.duration));
        }
    }

    #[test]
    fn noiseless_event_rows_are_scaled_signatures() {
        let spec = SyntheticSpec { noise: 0.0, ..small() };
        let data = generate_synthetic(&spec).unwrap();
        for v in &data.dataset.videos {
            for a in &v.annotations {
                let start = (a.onset / v.stride_sec).round() as usize;
                let end = (a.offset / v.stride_sec).round() as usize;
                let rows: Vec<&[f32]> = (start..end).map(|r| v.visual.row(r)).collect();
                let norms: Vec<f64> = rows
                    .iter()
                    .map(|r| r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt())
                    .collect();
                let expect_visual = if v.task == TaskId::Sed { 0.0 } else { 3.0 };
                assert!(norms.iter().all(|n| (n - expect_visual).abs() < 1e-5));
                assert!(rows.windows(2).all(|w| w[0] == w[1]));
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.vocab, b.vocab);
        let c = generate_synthetic(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn shared_labels_share_embedding_component() {
        let a = label_vector("dog barking", TaskId::Avel, 32);
        let b = label_vector("dog barking", TaskId::Tal, 32);
        let c = label_vector("speech", TaskId::Sed, 32);
        let dot = |x: &[f32], y: &[f32]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f32>();
        assert!(dot(&a, &b) > dot(&a, &c).abs() + 0.3);
    }

    #[test]
    fn oversized_events_are_config_errors() {
        let spec = SyntheticSpec {
            event_len: (4, 40),
            ..small()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    /// Nearest-centroid probe on ground-truth interval means of the modality
    /// that carries each task's signal.
    #[test]
    fn linear_probe_separates_classes() {
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
        for task in TaskId::ALL {
            let mut samples: Vec<(Vec<f64>, usize)> = Vec::new();
            for v in data.dataset.select(task, Split::Train) {
                let feats = if task == TaskId::Sed { &v.audio } else { &v.visual };
                for a in &v.annotations {
                    let (s, e) = (
                        (a.onset / v.stride_sec).round() as usize,
                        (a.offset / v.stride_sec).round() as usize,
                    );
                    let mut mean = vec![0.0; 32];
                    for r in s..e {
                        for (m, &x) in mean.iter_mut().zip(feats.row(r)) {
                            *m += x as f64 / (e - s) as f64;
                        }
                    }
                    samples.push((mean, a.class));
                }
            }
            let mut centroids = vec![vec![0.0; 32]; 5];
            let mut counts = [0usize; 5];
            for (x, c) in &samples {
                counts[*c] += 1;
                centroids[*c].iter_mut().zip(x).for_each(|(m, v)| *m += v);
            }
            for (m, &n) in centroids.iter_mut().zip(&counts) {
                m.iter_mut().for_each(|v| *v /= n as f64);
            }
            // argmin |x - mu|^2 is linear in x: argmax (mu . x - |mu|^2 / 2)
            let correct = samples
                .iter()
                .filter(|(x, c)| {
                    let score = |m: &Vec<f64>| {
                        m.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - 0.5 * m.iter().map(|a| a * a).sum::<f64>()
                    };
                    let best = (0..5)
                        .max_by(|&i, &j| score(&centroids[i]).partial_cmp(&score(&centroids[j])).unwrap())
                        .unwrap();
                    best == *c
                })
                .count();
            assert_eq!(correct, samples.len(), "{task}");
        }
    }
}
