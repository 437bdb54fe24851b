use rand::Rng;

use super::{ModelConfig, Pyramid};
use crate::error::{Error, Result};
use crate::nn::{Conv1d, Graph, LayerNorm, Linear, ParamId, ParamStore};
use crate::task::TaskId;
use crate::tensor::{Scalar, Tensor, Var};

const NORM_EPS: f64 = 1e-8;

/// Cosine similarity between projected pyramid features and projected class
/// text embeddings, multiplied by a learnable scale.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub feature_proj: Linear,
    pub text_proj: Linear,
    pub scale: ParamId,
}

impl ClassifierHead {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            feature_proj: Linear::new(store, "head.cls.feature_proj", 2 * cfg.d_model, cfg.d_embed, rng)?,
            text_proj: Linear::new(store, "head.cls.text_proj", cfg.text_dim, cfg.d_embed, rng)?,
            scale: store.add("head.cls.scale", Tensor::scalar(S::of(cfg.logit_scale_init)))?,
        })
    }

    /// Unit-norm projected class embeddings `[N, D']`.
    pub fn text_embeddings<S: Scalar>(&self, g: &mut Graph<S>, text: Var) -> Result<Var> {
        match g.shape(text) {
            [0, _] => return Err(Error::Config("empty class vocabulary".into())),
            [_, _] => {}
            s => return Err(Error::Config(format!("text embeddings must be [N, D], got {s:?}"))),
        }
        let t = self.text_proj.forward(g, text)?;
        g.normalize_rows(t, S::of(NORM_EPS))
    }

    /// Pre-sigmoid logits per level, `[T_l, N]`, bounded by the scale.
    pub fn logits<S: Scalar>(&self, g: &mut Graph<S>, pyramid: &Pyramid, text: Var) -> Result<Vec<Var>> {
        let that = self.text_embeddings(g, text)?;
        let tt = g.transpose(that)?;
        let scale = g.param(self.scale);
        let mut out = Vec::with_capacity(pyramid.levels.len());
        for lv in &pyramid.levels {
            let z = self.feature_proj.forward(g, lv.features)?;
            let z = g.normalize_rows(z, S::of(NORM_EPS))?;
            let cos = g.matmul(z, tt)?;
            out.push(g.mul(cos, scale)?);
        }
        Ok(out)
    }
}

/// Three temporal convolutions: two shared (each followed by layer norm and
/// ReLU) and a task-specific last layer followed by ReLU.
#[derive(Clone, Debug)]
pub struct RegressionHead {
    pub conv1: Conv1d,
    pub norm1: LayerNorm,
    pub conv2: Conv1d,
    pub norm2: LayerNorm,
    pub last: Vec<(TaskId, Conv1d)>,
}

impl RegressionHead {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        let k = cfg.head_kernel;
        let conv1 = Conv1d::new(store, "head.reg.conv1", 2 * d, d, k, 1, rng)?;
        let norm1 = LayerNorm::new(store, "head.reg.norm1", d)?;
        let conv2 = Conv1d::new(store, "head.reg.conv2", d, d, k, 1, rng)?;
        let norm2 = LayerNorm::new(store, "head.reg.norm2", d)?;
        let mut last = Vec::with_capacity(cfg.tasks.len());
        for &t in &cfg.tasks {
            let conv = Conv1d::new(store, &format!("head.reg.last.{}", t.name()), d, 2, k, 1, rng)?;
            store
                .get_mut(conv.bias)
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = S::of(cfg.reg_bias_init));
            last.push((t, conv));
        }
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            last,
        })
    }

    pub fn last_layer(&self, task: TaskId) -> Result<&Conv1d> {
        self.last
            .iter()
            .find(|(t, _)| *t == task)
            .map(|(_, c)| c)
            .ok_or_else(|| Error::Config(format!("no regression layer for task {task}")))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, features: Var, task: TaskId) -> Result<Var> {
        let last = self.last_layer(task)?;
        let h = self.conv1.forward(g, features)?;
        let h = self.norm1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.relu(h);
        let h = last.forward(g, h)?;
        Ok(g.relu(h))
    }
}
