//! The audio-visual pyramid network and its two heads.
//!
//! Each modality is projected to `D`, given sinusoidal positions and passed
//! through uni-modal self-attention blocks. Every fusion block then halves
//! both streams with a strided depthwise convolution and lets each stream
//! attend to itself using the *other* modality as the query. The two streams
//! are concatenated per level into a `2D`-wide feature pyramid that feeds a
//! language-aware classifier and a distance regressor.

mod config;
mod heads;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{InitConfig, ModelConfig, SeqLens};
pub use heads::{ClassifierHead, RegressionHead};

use crate::error::{Error, Result};
use crate::nn::{positional_embedding, AttentionMode, Conv1d, Graph, LayerNorm, Linear, ParamStore, TransformerBlock};
use crate::task::TaskId;
use crate::tensor::{Scalar, Tensor, Var};

/// One fused pyramid level: `[T / 2^l, 2D]` features at stride `2^l`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidLevel {
    pub features: Var,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    pub levels: Vec<PyramidLevel>,
}

/// Head outputs for one level, still on the graph.
#[derive(Clone, Copy, Debug)]
pub struct LevelOutput {
    /// `[T_l, N]` class probabilities.
    pub probs: Var,
    /// `[T_l, 2]` non-negative (start, end) distances in units of `stride`.
    pub dists: Var,
    pub stride: usize,
}

/// Detached head outputs for one level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPrediction<S> {
    pub probs: Tensor<S>,
    pub dists: Tensor<S>,
    pub stride: usize,
}

#[derive(Clone, Debug)]
struct Stream {
    proj: Linear,
    norm: LayerNorm,
    blocks: Vec<TransformerBlock>,
}

#[derive(Clone, Debug)]
struct FusionBlock {
    down_visual: Conv1d,
    down_audio: Conv1d,
    visual: TransformerBlock,
    audio: TransformerBlock,
}

#[derive(Clone, Debug)]
struct Layers {
    visual: Stream,
    audio: Stream,
    fusion: Vec<FusionBlock>,
    cls: ClassifierHead,
    reg: RegressionHead,
}

/// The full network together with its parameters.
#[derive(Clone, Debug)]
pub struct UniAv<S> {
    cfg: ModelConfig,
    pub params: ParamStore<S>,
    layers: Layers,
}

impl<S: Scalar> UniAv<S> {
    /// Build with seeded Glorot initialisation.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        let hidden = d * cfg.ffn_ratio;
        let tasks = cfg.tasks.clone();

        let stream = |store: &mut ParamStore<S>, rng: &mut ChaCha8Rng, name: &str, d_in: usize| -> Result<Stream> {
            Ok(Stream {
                proj: Linear::new(store, &format!("input.{name}.proj"), d_in, d, rng)?,
                norm: LayerNorm::new(store, &format!("input.{name}.norm"), d)?,
                blocks: (0..cfg.unimodal_layers)
                    .map(|i| {
                        TransformerBlock::new(
                            store,
                            &format!("unimodal.{name}.{i}"),
                            AttentionMode::SelfAttention,
                            &tasks,
                            d,
                            cfg.heads,
                            hidden,
                            rng,
                        )
                    })
                    .collect::<Result<_>>()?,
            })
        };
        let visual = stream(&mut store, &mut rng, "visual", cfg.input_dim_visual)?;
        let audio = stream(&mut store, &mut rng, "audio", cfg.input_dim_audio)?;

        let mut fusion = Vec::with_capacity(cfg.fusion_layers);
        for l in 0..cfg.fusion_layers {
            let p = format!("fusion.{}", l + 1);
            let k = cfg.downsample_kernel;
            fusion.push(FusionBlock {
                down_visual: Conv1d::depthwise(&mut store, &format!("{p}.visual.down"), d, k, 2, &mut rng)?,
                down_audio: Conv1d::depthwise(&mut store, &format!("{p}.audio.down"), d, k, 2, &mut rng)?,
                visual: TransformerBlock::new(
                    &mut store,
                    &format!("{p}.visual"),
                    AttentionMode::Cross,
                    &tasks,
                    d,
                    cfg.heads,
                    hidden,
                    &mut rng,
                )?,
                audio: TransformerBlock::new(
                    &mut store,
                    &format!("{p}.audio"),
                    AttentionMode::Cross,
                    &tasks,
                    d,
                    cfg.heads,
                    hidden,
                    &mut rng,
                )?,
            });
        }
        let cls = ClassifierHead::new(&mut store, &cfg, &mut rng)?;
        let reg = RegressionHead::new(&mut store, &cfg, &mut rng)?;
        apply_init(&mut store, &cfg.init);
        Ok(Self {
            cfg,
            params: store,
            layers: Layers {
                visual,
                audio,
                fusion,
                cls,
                reg,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn classifier(&self) -> &ClassifierHead {
        &self.layers.cls
    }

    pub fn regressor(&self) -> &RegressionHead {
        &self.layers.reg
    }

    /// Same architecture and parameter values, different element type.
    pub fn cast<T: Scalar>(&self) -> UniAv<T> {
        UniAv {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    fn check_task(&self, task: TaskId) -> Result<()> {
        if self.cfg.tasks.contains(&task) {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "model was built for tasks {:?}, not {task}",
                self.cfg.tasks
            )))
        }
    }

    /// Run the encoder and return the fused feature pyramid.
    pub fn encode(&self, g: &mut Graph<S>, visual: Var, audio: Var, task: TaskId) -> Result<Pyramid> {
        self.check_task(task)?;
        let (tv, dv) = dims(g, visual)?;
        let (ta, da) = dims(g, audio)?;
        if tv != ta {
            return Err(Error::Input(format!("visual length {tv} != audio length {ta}")));
        }
        if dv != self.cfg.input_dim_visual || da != self.cfg.input_dim_audio {
            return Err(Error::Input(format!(
                "feature widths ({dv}, {da}) != configured ({}, {})",
                self.cfg.input_dim_visual, self.cfg.input_dim_audio
            )));
        }
        let expected = self.cfg.max_seq_len.get(task);
        let unit = 1usize << self.cfg.fusion_layers;
        if tv != expected || tv % unit != 0 {
            return Err(Error::Input(format!(
                "sequence length {tv} must equal the {task} length {expected} (a multiple of {unit})"
            )));
        }

        let pos = g.input(positional_embedding(tv, self.cfg.d_model));
        let mut v = self.embed(g, &self.layers.visual, visual, pos, task)?;
        let mut a = self.embed(g, &self.layers.audio, audio, pos, task)?;

        let mut levels = Vec::with_capacity(self.cfg.fusion_layers);
        for (l, block) in self.layers.fusion.iter().enumerate() {
            let vd = block.down_visual.forward(g, v)?;
            let ad = block.down_audio.forward(g, a)?;
            // each stream keeps itself as key/value and queries with the other
            v = block.visual.forward(g, vd, Some(ad), task)?;
            a = block.audio.forward(g, ad, Some(vd), task)?;
            let features = g.concat_cols(&[v, a])?;
            levels.push(PyramidLevel {
                features,
                stride: 1 << (l + 1),
            });
        }
        Ok(Pyramid { levels })
    }

    fn embed(&self, g: &mut Graph<S>, s: &Stream, x: Var, pos: Var, task: TaskId) -> Result<Var> {
        let h = s.proj.forward(g, x)?;
        let h = s.norm.forward(g, h)?;
        let mut h = g.add(h, pos)?;
        for b in &s.blocks {
            h = b.forward(g, h, None, task)?;
        }
        Ok(h)
    }

    /// Per-level class probabilities against `text` (`[N, text_dim]`).
    pub fn classify(&self, g: &mut Graph<S>, pyramid: &Pyramid, text: Var) -> Result<Vec<Var>> {
        let logits = self.layers.cls.logits(g, pyramid, text)?;
        Ok(logits.into_iter().map(|l| g.sigmoid(l)).collect())
    }

    /// Per-level `(start, end)` distances in stride units.
    pub fn regress(&self, g: &mut Graph<S>, pyramid: &Pyramid, task: TaskId) -> Result<Vec<Var>> {
        self.check_task(task)?;
        pyramid
            .levels
            .iter()
            .map(|lv| self.layers.reg.forward(g, lv.features, task))
            .collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph<S>,
        visual: Var,
        audio: Var,
        task: TaskId,
        text: Var,
    ) -> Result<Vec<LevelOutput>> {
        let pyramid = self.encode(g, visual, audio, task)?;
        let probs = self.classify(g, &pyramid, text)?;
        let dists = self.regress(g, &pyramid, task)?;
        Ok(pyramid
            .levels
            .iter()
            .zip(probs.into_iter().zip(dists))
            .map(|(lv, (probs, dists))| LevelOutput {
                probs,
                dists,
                stride: lv.stride,
            })
            .collect())
    }

    /// Inference without gradient tracking.
    pub fn predict(
        &self,
        visual: &Tensor<S>,
        audio: &Tensor<S>,
        task: TaskId,
        text: &Tensor<S>,
    ) -> Result<Vec<LevelPrediction<S>>> {
        let mut g = Graph::inference(&self.params);
        let v = g.input(visual.clone());
        let a = g.input(audio.clone());
        let t = g.input(text.clone());
        let outs = self.forward(&mut g, v, a, task, t)?;
        Ok(outs
            .into_iter()
            .map(|o| LevelPrediction {
                probs: g.value(o.probs).clone(),
                dists: g.value(o.dists).clone(),
                stride: o.stride,
            })
            .collect())
    }
}

fn apply_init<S: Scalar>(store: &mut ParamStore<S>, init: &InitConfig) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let w = store.get_mut(id);
        let set = |w: &mut Tensor<S>, f: &dyn Fn(S) -> S| w.data_mut().iter_mut().for_each(|x| *x = f(*x));
        if init.zero_residual && (name.ends_with(".attn.out.weight") || name.ends_with(".fc2.weight")) {
            set(w, &|_| S::zero());
        } else if init.average_downsample && name.ends_with(".down.weight") {
            let k = S::of(1.0 / w.shape()[0] as f64);
            set(w, &|_| k);
        } else if name.starts_with("input.") && name.ends_with(".proj.weight") {
            let g = S::of(init.input_gain);
            set(w, &|x| x * g);
        } else if name.starts_with("head.cls.") && name.ends_with("_proj.weight") {
            let g = S::of(init.cls_gain);
            set(w, &|x| x * g);
        } else if name.starts_with("head.reg.") && name.ends_with(".weight") {
            let g = S::of(init.reg_gain);
            set(w, &|x| x * g);
        }
    }
}

fn dims<S: Scalar>(g: &Graph<S>, v: Var) -> Result<(usize, usize)> {
    match g.shape(v) {
        [t, d] => Ok((*t, *d)),
        s => Err(Error::Input(format!("expected [T, D] features, got {s:?}"))),
    }
}

/// Segment covered by moment `t` of a level with `stride`, in input-grid
/// units: centre `(t + 0.5) * stride`, extended by the distances scaled by
/// `stride`.
pub fn decode_segment(t: usize, stride: usize, d_start: f64, d_end: f64) -> (f64, f64) {
    let s = stride as f64;
    let c = (t as f64 + 0.5) * s;
    (c - d_start * s, c + d_end * s)
}

#[cfg(test)]
mod tests;
