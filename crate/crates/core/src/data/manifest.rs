use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_json, write_features, write_json, Dataset, Split, VideoItem, Vocabulary};
use crate::error::{Error, Result};
use crate::loss::Annotation;
use crate::model::SeqLens;
use crate::task::TaskId;

/// Dataset index. Feature paths are relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub videos: Vec<ManifestVideo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub id: String,
    pub task: TaskId,
    #[serde(default = "default_split")]
    pub split: Split,
    pub duration: f64,
    pub stride_sec: f64,
    pub visual: PathBuf,
    pub audio: PathBuf,
    /// Feature rows before padding; defaults to the file's row count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_len: Option<usize>,
    #[serde(default)]
    pub annotations: Vec<ManifestAnnotation>,
}

fn default_split() -> Split {
    Split::Val
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestAnnotation {
    pub label: String,
    pub onset: f64,
    pub offset: f64,
}

/// Load every video in the manifest, padding or cropping features to the
/// task's sequence length. Annotations are clipped to the kept window;
/// those that start after it are dropped.
pub fn load_manifest(path: &Path, vocab: &Vocabulary, lens: &SeqLens) -> Result<Dataset> {
    let manifest: Manifest = read_json(path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for v in manifest.videos {
        videos.push(load_video(root, v, vocab, lens)?);
    }
    Ok(Dataset { videos })
}

fn load_video(root: &Path, v: ManifestVideo, vocab: &Vocabulary, lens: &SeqLens) -> Result<VideoItem> {
    let table = vocab.get(v.task)?;
    if !(v.stride_sec > 0.0 && v.duration >= 0.0) {
        return Err(Error::Data(format!(
            "video `{}`: duration {} and stride {} must be non-negative and positive",
            v.id, v.duration, v.stride_sec
        )));
    }
    let visual = super::read_features(&root.join(&v.visual))?;
    let audio = super::read_features(&root.join(&v.audio))?;
    let rows = visual.shape()[0];
    if audio.shape()[0] != rows {
        return Err(Error::Data(format!(
            "video `{}`: visual has {rows} rows, audio has {}",
            v.id,
            audio.shape()[0]
        )));
    }
    let len = lens.get(v.task);
    let valid_len = v.valid_len.unwrap_or(rows).min(rows).min(len);
    let window = valid_len as f64 * v.stride_sec;

    let mut annotations = Vec::with_capacity(v.annotations.len());
    for a in &v.annotations {
        let class = table
            .index_of(&a.label)
            .ok_or_else(|| Error::Data(format!("video `{}`: unknown {} class `{}`", v.id, v.task, a.label)))?;
        if !(0.0 <= a.onset && a.onset <= a.offset && a.offset <= v.duration) {
            return Err(Error::Data(format!(
                "video `{}`: annotation `{}` [{}, {}] outside [0, {}]",
                v.id, a.label, a.onset, a.offset, v.duration
            )));
        }
        if a.onset >= window && a.onset > 0.0 {
            continue;
        }
        annotations.push(Annotation {
            onset: a.onset,
            offset: a.offset.min(window),
            class,
        });
    }
    Ok(VideoItem {
        id: v.id,
        task: v.task,
        split: v.split,
        duration: v.duration,
        stride_sec: v.stride_sec,
        visual: visual.pad_or_crop_rows(len)?,
        audio: audio.pad_or_crop_rows(len)?,
        annotations,
        valid_len,
    })
}

/// Write features for every video under `dir/<task>/`, plus `manifest.json`
/// and `vocab.json`.
pub fn write_dataset(dir: &Path, data: &Dataset, vocab: &Vocabulary) -> Result<()> {
    let mut manifest = Manifest::default();
    for v in &data.videos {
        let sub = dir.join(v.task.name());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let rel_v = PathBuf::from(v.task.name()).join(format!("{}.visual.feat", v.id));
        let rel_a = PathBuf::from(v.task.name()).join(format!("{}.audio.feat", v.id));
        write_features(&dir.join(&rel_v), &v.visual)?;
        write_features(&dir.join(&rel_a), &v.audio)?;
        let table = vocab.get(v.task)?;
        manifest.videos.push(ManifestVideo {
            id: v.id.clone(),
            task: v.task,
            split: v.split,
            duration: v.duration,
            stride_sec: v.stride_sec,
            visual: rel_v,
            audio: rel_a,
            valid_len: Some(v.valid_len),
            annotations: v
                .annotations
                .iter()
                .map(|a| ManifestAnnotation {
                    label: table.classes()[a.class].name.clone(),
                    onset: a.onset,
                    offset: a.offset,
                })
                .collect(),
        });
    }
    write_json(&dir.join("manifest.json"), &manifest)?;
    vocab.save(&dir.join("vocab.json"))
}
