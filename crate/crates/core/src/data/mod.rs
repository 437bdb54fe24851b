//! Videos, on-disk formats and synthetic data.

mod checkpoint;
mod features;
mod manifest;
mod synthetic;
mod vocab;

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadMode, OptimState};
pub use features::{decode_features, encode_features, read_features, write_features, FEATURE_MAGIC};
pub use manifest::{load_manifest, write_dataset, Manifest, ManifestAnnotation, ManifestVideo};
pub use synthetic::{generate_synthetic, label_pool, label_vector, SyntheticData, SyntheticSpec};
pub use vocab::{ClassEntry, TextEmbeddingTable, Vocabulary, UNIT_NORM_TOL};

pub use crate::loss::Annotation;

use crate::error::{Error, Result};
use crate::task::TaskId;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One video as the model sees it: fixed-length features, zero-padded past
/// `valid_len`, and annotations in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoItem {
    pub id: String,
    pub task: TaskId,
    pub split: Split,
    pub duration: f64,
    pub stride_sec: f64,
    pub visual: Tensor<f32>,
    pub audio: Tensor<f32>,
    pub annotations: Vec<Annotation>,
    pub valid_len: usize,
}

impl VideoItem {
    pub fn len(&self) -> usize {
        self.visual.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All videos of a run, in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoItem>,
}

impl Dataset {
    pub fn select(&self, task: TaskId, split: Split) -> Vec<&VideoItem> {
        self.videos
            .iter()
            .filter(|v| v.task == task && v.split == split)
            .collect()
    }

    pub fn count(&self, task: TaskId, split: Split) -> usize {
        self.videos
            .iter()
            .filter(|v| v.task == task && v.split == split)
            .count()
    }
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        detail: e.to_string(),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
