use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskId;
use crate::tensor::{Scalar, Tensor};

/// Rows must have unit L2 norm within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-5;

/// One class of a vocabulary: its label, the task whose prompt wrapped the
/// label, and the resulting text embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub prompt: TaskId,
    pub embedding: Vec<f32>,
}

/// Class text embeddings used by the classifier, in class-index order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TextEmbeddingTable {
    dim: usize,
    classes: Vec<ClassEntry>,
}

#[derive(Deserialize)]
struct RawTable {
    dim: usize,
    classes: Vec<ClassEntry>,
}

impl<'de> Deserialize<'de> for TextEmbeddingTable {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawTable::deserialize(d)?;
        TextEmbeddingTable::new(raw.dim, raw.classes).map_err(serde::de::Error::custom)
    }
}

impl TextEmbeddingTable {
    /// Validates widths, unit norms and name uniqueness. Rows are never
    /// renormalised.
    pub fn new(dim: usize, classes: Vec<ClassEntry>) -> Result<Self> {
        let mut table = Self {
            dim,
            classes: Vec::with_capacity(classes.len()),
        };
        for c in classes {
            table.push(c)?;
        }
        Ok(table)
    }

    pub fn push(&mut self, entry: ClassEntry) -> Result<()> {
        if entry.embedding.len() != self.dim {
            return Err(Error::Config(format!(
                "class `{}` has a {}-dim embedding, table is {}-dim",
                entry.name,
                entry.embedding.len(),
                self.dim
            )));
        }
        let norm = entry
            .embedding
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Config(format!(
                "class `{}` embedding has norm {norm}, expected 1",
                entry.name
            )));
        }
        if self.index_of(&entry.name).is_some() {
            return Err(Error::Config(format!("duplicate class name `{}`", entry.name)));
        }
        self.classes.push(entry);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn names(&self) -> Vec<&str> {
        self.classes.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    /// `[N, dim]` embedding matrix.
    pub fn matrix<S: Scalar>(&self) -> Tensor<S> {
        let data = self
            .classes
            .iter()
            .flat_map(|c| c.embedding.iter().map(|&x| S::of(x as f64)))
            .collect();
        Tensor::new(&[self.classes.len(), self.dim], data).expect("rows have table width")
    }
}

/// Per-task vocabularies, stored together as one JSON document.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub tasks: BTreeMap<TaskId, TextEmbeddingTable>,
}

impl Vocabulary {
    pub fn get(&self, task: TaskId) -> Result<&TextEmbeddingTable> {
        self.tasks
            .get(&task)
            .ok_or_else(|| Error::Config(format!("vocabulary has no {task} classes")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        super::read_json(path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_json(path, self)
    }
}
