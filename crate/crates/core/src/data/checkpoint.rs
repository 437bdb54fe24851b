//! Checkpoints: a JSON index (`*.ckpt.json`) naming every tensor with its
//! shape and byte offset, next to a raw little-endian `f32` payload
//! (`*.bin`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_json, write_json};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, UniAv};
use crate::tensor::Tensor;

const FORMAT: &str = "uniav-checkpoint-1";

/// Adam moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Tensor<f32>,
    pub v: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: usize,
    /// Parameters in model order.
    pub params: Vec<(String, Tensor<f32>)>,
    /// Optimizer moments keyed by parameter name; absent when the run is not
    /// meant to be resumed.
    pub optim: Option<BTreeMap<String, OptimState>>,
}

/// How strictly a checkpoint must match the receiving model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadMode {
    /// Same tensor names and shapes on both sides.
    Strict,
    /// Every model tensor must be present with its shape; checkpoint tensors
    /// the model lacks (other tasks' experts) are ignored.
    Partial,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Index {
    format: String,
    epoch: usize,
    config: ModelConfig,
    payload: PathBuf,
    payload_bytes: u64,
    tensors: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optim: Option<Vec<OptimEntry>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimEntry {
    name: String,
    step: u64,
    m_offset: u64,
    v_offset: u64,
}

impl Checkpoint {
    pub fn from_model(model: &UniAv<f32>, epoch: usize, optim: Option<BTreeMap<String, OptimState>>) -> Self {
        Self {
            config: model.config().clone(),
            epoch,
            params: model
                .params
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
            optim,
        }
    }

    /// Copy the checkpoint's tensors into `model`, validating every name and
    /// shape first. The model is untouched on error.
    pub fn load_into(&self, model: &mut UniAv<f32>, mode: LoadMode) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor<f32>> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut problems = Vec::new();
        let mut plan = Vec::new();
        for (id, name, t) in model.params.iter() {
            match by_name.get(name) {
                None => problems.push(format!("missing `{name}`")),
                Some(src) if src.shape() != t.shape() => problems.push(format!(
                    "`{name}` has shape {:?} in the checkpoint, {:?} in the model",
                    src.shape(),
                    t.shape()
                )),
                Some(src) => plan.push((id, *src)),
            }
        }
        if mode == LoadMode::Strict {
            for (name, _) in &self.params {
                if model.params.id(name).is_none() {
                    problems.push(format!("unexpected `{name}`"));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Load(problems.join("; ")));
        }
        for (id, src) in plan {
            *model.params.get_mut(id) = src.clone();
        }
        Ok(())
    }
}

/// Write `<stem>.ckpt.json` and `<stem>.bin` into `dir`; returns the index path.
pub fn save_checkpoint(dir: &Path, stem: &str, ckpt: &Checkpoint) -> Result<PathBuf> {
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |t: &Tensor<f32>| {
        let offset = payload.len() as u64;
        for x in t.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
        offset
    };
    let tensors = ckpt
        .params
        .iter()
        .map(|(name, t)| Entry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: push(t),
        })
        .collect();
    let optim = ckpt.optim.as_ref().map(|slots| {
        slots
            .iter()
            .map(|(name, s)| OptimEntry {
                name: name.clone(),
                step: s.step,
                m_offset: push(&s.m),
                v_offset: push(&s.v),
            })
            .collect()
    });
    let bin = PathBuf::from(format!("{stem}.bin"));
    let index = Index {
        format: FORMAT.into(),
        epoch: ckpt.epoch,
        config: ckpt.config.clone(),
        payload: bin.clone(),
        payload_bytes: payload.len() as u64,
        tensors,
        optim,
    };
    let bin_path = dir.join(&bin);
    std::fs::write(&bin_path, &payload).map_err(|e| Error::io(&bin_path, e))?;
    let path = dir.join(format!("{stem}.ckpt.json"));
    write_json(&path, &index)?;
    Ok(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let index: Index = read_json(path)?;
    if index.format != FORMAT {
        return Err(Error::Load(format!(
            "{}: unsupported checkpoint format `{}`",
            path.display(),
            index.format
        )));
    }
    let bin_path = path.parent().unwrap_or(Path::new(".")).join(&index.payload);
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() as u64 != index.payload_bytes {
        return Err(Error::Format {
            path: bin_path,
            offset: bytes.len().min(index.payload_bytes as usize) as u64,
            detail: format!(
                "payload is {} bytes, index declares {}",
                bytes.len(),
                index.payload_bytes
            ),
        });
    }
    let read = |name: &str, shape: &[usize], offset: u64| -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let start = offset as usize;
        let end = start + 4 * n;
        if end > bytes.len() {
            return Err(Error::Format {
                path: bin_path.clone(),
                offset,
                detail: format!("tensor `{name}` runs past the end of the payload"),
            });
        }
        let data = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
    };
    let mut params = Vec::with_capacity(index.tensors.len());
    for e in &index.tensors {
        params.push((e.name.clone(), read(&e.name, &e.shape, e.offset)?));
    }
    let optim = match &index.optim {
        None => None,
        Some(entries) => {
            let shapes: BTreeMap<&str, &[usize]> = index
                .tensors
                .iter()
                .map(|e| (e.name.as_str(), e.shape.as_slice()))
                .collect();
            let mut slots = BTreeMap::new();
            for o in entries {
                let shape = shapes
                    .get(o.name.as_str())
                    .ok_or_else(|| Error::Load(format!("optimizer state for unknown tensor `{}`", o.name)))?;
                slots.insert(
                    o.name.clone(),
                    OptimState {
                        step: o.step,
                        m: read(&o.name, shape, o.m_offset)?,
                        v: read(&o.name, shape, o.v_offset)?,
                    },
                );
            }
            Some(slots)
        }
    };
    Ok(Checkpoint {
        config: index.config,
        epoch: index.epoch,
        params,
        optim,
    })
}
