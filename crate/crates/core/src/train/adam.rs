use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::OptimState;
use crate::error::{Error, Result};
use crate::nn::{Grads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 5,
            warmup_epochs: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
        {
            return Err(Error::Config("invalid Adam hyperparameters".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to
/// 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay. Parameters without a gradient in a step
/// are left alone entirely: no decay, no moment update, no step count.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    slots: Vec<Option<OptimState>>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig, num_params: usize) -> Self {
        Self {
            cfg: cfg.clone(),
            slots: vec![None; num_params],
        }
    }

    /// Apply one update. Nothing changes if any gradient is non-finite; the
    /// error names the first offending parameter.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>, lr: f64, task: &str) -> Result<()> {
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient {
                        task: task.to_string(),
                        param: params.name(id).to_string(),
                    });
                }
            }
        }
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let decay = (1.0 - lr * self.cfg.weight_decay) as f32;
        for id in params.ids() {
            let Some(g) = grads.get(id) else { continue };
            let p = params.get_mut(id);
            let slot = self.slots[id.index()].get_or_insert_with(|| OptimState {
                step: 0,
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            slot.step += 1;
            let c1 = 1.0 - b1.powi(slot.step as i32);
            let c2 = 1.0 - b2.powi(slot.step as i32);
            let (b1f, b2f) = (b1 as f32, b2 as f32);
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(slot.m.data_mut())
                .zip(slot.v.data_mut())
            {
                *m = b1f * *m + (1.0 - b1f) * gi;
                *v = b2f * *v + (1.0 - b2f) * gi * gi;
                let m_hat = *m as f64 / c1;
                let v_hat = *v as f64 / c2;
                *w = *w * decay - (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
            }
        }
        Ok(())
    }

    /// Moments keyed by parameter name, for checkpoints.
    pub fn export(&self, params: &ParamStore<f32>) -> BTreeMap<String, OptimState> {
        params
            .ids()
            .filter_map(|id| {
                self.slots[id.index()]
                    .as_ref()
                    .map(|s| (params.name(id).to_string(), s.clone()))
            })
            .collect()
    }

    pub fn restore(&mut self, params: &ParamStore<f32>, state: &BTreeMap<String, OptimState>) -> Result<()> {
        for (name, s) in state {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Load(format!("optimizer state for unknown parameter `{name}`")))?;
            if s.m.shape() != params.get(id).shape() {
                return Err(Error::Load(format!("optimizer state shape mismatch for `{name}`")));
            }
            self.slots[id.index()] = Some(s.clone());
        }
        Ok(())
    }
}
