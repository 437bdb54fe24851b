use rand::Rng;

use super::params::{uniform, xavier, Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::task::TaskId;
use crate::tensor::{ConvSpec, Scalar, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dims: (usize, usize),
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{name}.weight"), xavier(&[d_in, d_out], d_in, d_out, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?,
            dims: (d_in, d_out),
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, S::of(LN_EPS))
    }
}

/// 1-D convolution with "same" zero padding (`k / 2` on both sides).
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
}

impl Conv1d {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let fan = kernel * c_in;
        Ok(Self {
            weight: store.add(
                format!("{name}.weight"),
                xavier(&[kernel, c_in, c_out], fan, kernel * c_out, rng),
            )?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?,
            spec: ConvSpec {
                stride,
                padding: kernel / 2,
                depthwise: false,
            },
        })
    }

    /// Depthwise variant: one kernel per channel, `[kernel, channels]`.
    pub fn depthwise<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = (3.0 / kernel as f64).sqrt();
        Ok(Self {
            weight: store.add(format!("{name}.weight"), uniform(&[kernel, channels], bound, rng))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels]))?,
            spec: ConvSpec {
                stride,
                padding: kernel / 2,
                depthwise: true,
            },
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv1d(x, w, Some(b), self.spec)
    }
}

/// Which sequence supplies the queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    /// Queries, keys and values all come from the block's own stream.
    SelfAttention,
    /// Queries come from the other modality; keys and values from the
    /// block's own stream.
    Cross,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "model width {dim} is not divisible by {heads} attention heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng)?,
            heads,
            dim,
        })
    }

    /// Scaled dot-product attention with global window. Output has one row
    /// per query position.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, q_src: Var, kv_src: Var) -> Result<Var> {
        for (label, v) in [("query", q_src), ("key/value", kv_src)] {
            if g.shape(v).len() != 2 || g.shape(v)[1] != self.dim {
                return Err(Error::Config(format!(
                    "attention {label} input {:?} does not have width {}",
                    g.shape(v),
                    self.dim
                )));
            }
        }
        let q = self.q.forward(g, q_src)?;
        let k = self.k.forward(g, kv_src)?;
        let v = self.v.forward(g, kv_src)?;
        let dh = self.dim / self.heads;
        let scale = S::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax(scores)?;
            outs.push(g.matmul(weights, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.out.forward(g, merged)
    }
}

/// Linear -> GELU -> Linear.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// One feed-forward expert per task, hard-selected by the batch's task.
#[derive(Clone, Debug)]
pub struct MultiwayFfn {
    pub experts: Vec<(TaskId, FeedForward)>,
}

impl MultiwayFfn {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        tasks: &[TaskId],
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let experts = tasks
            .iter()
            .map(|&t| {
                Ok((
                    t,
                    FeedForward::new(store, &format!("{name}.expert.{}", t.name()), dim, hidden, rng)?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(Self { experts })
    }

    pub fn expert(&self, task: TaskId) -> Result<&FeedForward> {
        self.experts
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Config(format!("no expert registered for task {task}")))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var, task: TaskId) -> Result<Var> {
        self.expert(task)?.forward(g, x)
    }
}

/// Pre-norm transformer block with a task-switched feed-forward sublayer:
///
/// ```text
/// F' = F + MHA(q = LN(query source), kv = LN(F))
/// F  = F' + MultiwayFFN_task(LN(F'))
/// ```
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub mode: AttentionMode,
    pub norm_kv: LayerNorm,
    /// Present in cross mode only.
    pub norm_q: Option<LayerNorm>,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: MultiwayFfn,
    pub dim: usize,
}

impl TransformerBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        mode: AttentionMode,
        tasks: &[TaskId],
        dim: usize,
        heads: usize,
        ffn_hidden: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let norm_kv = LayerNorm::new(store, &format!("{name}.norm_attn"), dim)?;
        let norm_q = match mode {
            AttentionMode::Cross => Some(LayerNorm::new(store, &format!("{name}.norm_query"), dim)?),
            AttentionMode::SelfAttention => None,
        };
        let attn = MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng)?;
        let norm_ffn = LayerNorm::new(store, &format!("{name}.norm_ffn"), dim)?;
        let ffn = MultiwayFfn::new(store, &format!("{name}.ffn"), tasks, dim, ffn_hidden, rng)?;
        Ok(Self {
            mode,
            norm_kv,
            norm_q,
            attn,
            norm_ffn,
            ffn,
            dim,
        })
    }

    /// `other` is the query stream and must be given exactly in cross mode.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var, other: Option<Var>, task: TaskId) -> Result<Var> {
        if g.shape(x).len() != 2 || g.shape(x)[1] != self.dim {
            return Err(Error::Config(format!(
                "block input {:?} does not have width {}",
                g.shape(x),
                self.dim
            )));
        }
        let h = self.norm_kv.forward(g, x)?;
        let q = match (self.mode, other, &self.norm_q) {
            (AttentionMode::SelfAttention, None, _) => h,
            (AttentionMode::Cross, Some(o), Some(nq)) => {
                if g.shape(o) != g.shape(x) {
                    return Err(Error::Config(format!(
                        "cross-attention streams differ: {:?} vs {:?}",
                        g.shape(o),
                        g.shape(x)
                    )));
                }
                nq.forward(g, o)?
            }
            (mode, other, _) => {
                return Err(Error::Config(format!(
                    "{mode:?} block called with{} a query stream",
                    if other.is_some() { "" } else { "out" }
                )))
            }
        };
        let a = self.attn.forward(g, q, h)?;
        let x = g.add(x, a)?;
        let h = self.norm_ffn.forward(g, x)?;
        let f = self.ffn.forward(g, h, task)?;
        g.add(x, f)
    }
}

/// Sinusoidal position table `[len, dim]`: channel `2i` holds
/// `sin(t / 10000^(2i/dim))`, channel `2i+1` the matching cosine.
pub fn positional_embedding<S: Scalar>(len: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * dim);
    for t in 0..len {
        for c in 0..dim {
            let i = (c / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * i / dim as f64);
            let angle = t as f64 * freq;
            data.push(S::of(if c % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(&[len, dim], data).expect("length matches shape")
}
