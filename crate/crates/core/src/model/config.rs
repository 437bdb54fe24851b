use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskId;

/// Fixed sequence length per task; inputs are padded or cropped to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqLens {
    pub tal: usize,
    pub avel: usize,
    pub sed: usize,
}

impl SeqLens {
    pub fn uniform(len: usize) -> Self {
        Self {
            tal: len,
            avel: len,
            sed: len,
        }
    }

    pub fn get(&self, task: TaskId) -> usize {
        match task {
            TaskId::Tal => self.tal,
            TaskId::Avel => self.avel,
            TaskId::Sed => self.sed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim_visual: usize,
    pub input_dim_audio: usize,
    /// Width of the frozen class-name text embeddings.
    pub text_dim: usize,
    /// Per-modality model width `D`; pyramid levels are `2D` wide.
    pub d_model: usize,
    /// Shared classification embedding width `D'`.
    pub d_embed: usize,
    /// Uni-modal blocks per modality.
    pub unimodal_layers: usize,
    /// Fusion blocks; each one halves the temporal length and adds a level.
    pub fusion_layers: usize,
    pub heads: usize,
    /// Expert hidden width as a multiple of `d_model`.
    pub ffn_ratio: usize,
    pub tasks: Vec<TaskId>,
    pub max_seq_len: SeqLens,
    /// Upper bounds (input-grid units) separating the regression ranges of
    /// consecutive levels: level `l` takes max distances in
    /// `[bounds[l-2], bounds[l-1])`, the first level starts at 0 and the last
    /// is unbounded.
    pub regression_bounds: Vec<f64>,
    /// Initial value of the learnable similarity scale.
    pub logit_scale_init: f64,
    /// Initial bias of the task-specific last regression layer.
    pub reg_bias_init: f64,
    pub downsample_kernel: usize,
    pub head_kernel: usize,
    #[serde(default)]
    pub init: InitConfig,
}

/// Weight initialization on top of Xavier-uniform. Gains multiply the
/// Xavier draw of the named layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Zero the attention output and expert second-layer weights, so every
    /// block starts as the identity.
    pub zero_residual: bool,
    /// Start the strided downsampling kernels as moving averages.
    pub average_downsample: bool,
    /// Input projections (each is followed by layer norm).
    pub input_gain: f64,
    /// Classifier feature and text projections (followed by row norm).
    pub cls_gain: f64,
    /// All regression-head convolutions.
    pub reg_gain: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            zero_residual: true,
            average_downsample: true,
            input_gain: 0.01,
            cls_gain: 0.03,
            reg_gain: 0.3,
        }
    }
}

impl InitConfig {
    /// Plain Xavier everywhere.
    pub fn xavier() -> Self {
        Self {
            zero_residual: false,
            average_downsample: false,
            input_gain: 1.0,
            cls_gain: 1.0,
            reg_gain: 1.0,
        }
    }
}

impl ModelConfig {
    /// Architecture constants used with 1536-d pre-extracted features.
    pub fn full_scale() -> Self {
        Self {
            input_dim_visual: 1536,
            input_dim_audio: 1536,
            text_dim: 1536,
            d_model: 512,
            d_embed: 512,
            unimodal_layers: 2,
            fusion_layers: 6,
            heads: 4,
            ffn_ratio: 4,
            tasks: TaskId::ALL.to_vec(),
            max_seq_len: SeqLens {
                tal: 256,
                avel: 256,
                sed: 64,
            },
            regression_bounds: Self::octave_bounds(6),
            logit_scale_init: 10.0,
            reg_bias_init: 1.0,
            downsample_kernel: 3,
            head_kernel: 3,
            init: InitConfig::default(),
        }
    }

    /// Small configuration for synthetic features.
    pub fn desk() -> Self {
        Self {
            input_dim_visual: 32,
            input_dim_audio: 32,
            text_dim: 32,
            d_model: 64,
            d_embed: 64,
            max_seq_len: SeqLens::uniform(64),
            ..Self::full_scale()
        }
    }

    /// `[8, 16, 32, ...]`, one bound between each pair of adjacent levels.
    pub fn octave_bounds(levels: usize) -> Vec<f64> {
        (0..levels.saturating_sub(1))
            .map(|i| 8.0 * f64::powi(2.0, i as i32))
            .collect()
    }

    pub fn with_tasks(mut self, tasks: &[TaskId]) -> Self {
        self.tasks = tasks.to_vec();
        self
    }

    /// Regression range `[lo, hi)` of 1-based pyramid level `level`.
    pub fn regression_range(&self, level: usize) -> (f64, f64) {
        let lo = if level <= 1 {
            0.0
        } else {
            self.regression_bounds[level - 2]
        };
        let hi = self.regression_bounds.get(level - 1).copied().unwrap_or(f64::INFINITY);
        (lo, hi)
    }

    pub fn regression_ranges(&self) -> Vec<(f64, f64)> {
        (1..=self.fusion_layers).map(|l| self.regression_range(l)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tasks.is_empty() {
            return fail("model needs at least one task".into());
        }
        let mut sorted = self.tasks.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.tasks.len() {
            return fail(format!("duplicate task in {:?}", self.tasks));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.fusion_layers == 0 {
            return fail("fusion_layers must be at least 1".into());
        }
        for d in [
            self.input_dim_visual,
            self.input_dim_audio,
            self.text_dim,
            self.d_model,
            self.d_embed,
            self.ffn_ratio,
        ] {
            if d == 0 {
                return fail("all widths must be positive".into());
            }
        }
        let unit = 1usize << self.fusion_layers;
        for &t in &self.tasks {
            let len = self.max_seq_len.get(t);
            if len == 0 || !len.is_multiple_of(unit) {
                return fail(format!(
                    "max_seq_len {len} for {t} is not a positive multiple of 2^{} = {unit}",
                    self.fusion_layers
                ));
            }
        }
        if self.regression_bounds.len() + 1 != self.fusion_layers {
            return fail(format!(
                "{} regression bounds given for {} levels (need {})",
                self.regression_bounds.len(),
                self.fusion_layers,
                self.fusion_layers - 1
            ));
        }
        let mut prev = 0.0;
        for &b in &self.regression_bounds {
            if !(b > prev) || !b.is_finite() {
                return fail(format!(
                    "regression bounds must increase from 0: {:?}",
                    self.regression_bounds
                ));
            }
            prev = b;
        }
        let i = &self.init;
        if ![i.input_gain, i.cls_gain, i.reg_gain]
            .iter()
            .all(|g| g.is_finite() && *g > 0.0)
        {
            return fail("init gains must be positive".into());
        }
        for k in [self.downsample_kernel, self.head_kernel] {
            if k % 2 == 0 {
                return fail(format!("kernel width {k} must be odd"));
            }
        }
        Ok(())
    }
}
