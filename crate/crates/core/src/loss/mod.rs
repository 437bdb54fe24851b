//! Target assignment and the two training losses.

mod assign;

pub use assign::{
    assign_targets, pyramid_geometry, to_grid, Annotation, AssignmentTarget, GridSegment, LevelGeometry, LevelTargets,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LevelOutput;
use crate::nn::Graph;
use crate::segment::giou;
use crate::tensor::focal_term;
use crate::tensor::{Scalar, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub cls_weight: f64,
    pub reg_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            gamma: 2.0,
            cls_weight: 1.0,
            reg_weight: 1.0,
        }
    }
}

/// Sigmoid focal loss summed over all entries and divided by the number of
/// positive rows (at least one). `probs` and `targets` are row-major
/// `[rows, classes]`.
pub fn sigmoid_focal_loss(probs: &[f64], targets: &[f64], classes: usize, alpha: f64, gamma: f64) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| focal_term(p, y, alpha, gamma).0)
        .sum();
    let positives = targets
        .chunks(classes.max(1))
        .filter(|row| row.iter().any(|&y| y > 0.0))
        .count();
    total / positives.max(1) as f64
}

/// `1 - gIoU` of two 1-D segments.
pub fn giou_loss_1d(pred: (f64, f64), target: (f64, f64)) -> f64 {
    1.0 - giou(pred, target)
}

/// Loss of one item, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub cls: Var,
    pub reg: Var,
}

/// Classification loss over every valid moment plus gIoU loss over positive
/// moments, both divided by `normalizer` (the positive count of the whole
/// batch, at least 1). Padded moments contribute nothing.
pub fn item_loss<S: Scalar>(
    g: &mut Graph<S>,
    outputs: &[LevelOutput],
    target: &AssignmentTarget,
    cfg: &LossConfig,
    normalizer: f64,
) -> Result<LossParts> {
    if outputs.len() != target.levels.len() {
        return Err(Error::dim(
            "loss",
            format!(
                "{} output levels vs {} target levels",
                outputs.len(),
                target.levels.len()
            ),
        ));
    }
    let norm = S::of(1.0 / normalizer.max(1.0));
    let (alpha, gamma) = (S::of(cfg.alpha), S::of(cfg.gamma));

    let mut cls_terms = Vec::with_capacity(outputs.len());
    let mut reg_terms = Vec::new();
    for (out, lt) in outputs.iter().zip(&target.levels) {
        let targets: Vec<S> = lt.classes.iter().map(|&y| S::of(y)).collect();
        let weights: Vec<S> = lt.valid.iter().map(|&v| if v { S::one() } else { S::zero() }).collect();
        cls_terms.push(g.focal_loss_sum(out.probs, &targets, &weights, alpha, gamma)?);

        let rows: Vec<usize> = (0..lt.len).filter(|&t| lt.positive[t]).collect();
        if !rows.is_empty() {
            let pred = g.gather_rows(out.dists, &rows)?;
            let tg: Vec<[S; 2]> = rows.iter().map(|&t| lt.dists[t].map(S::of)).collect();
            reg_terms.push(g.giou_loss_sum(pred, &tg)?);
        }
    }

    let cls = sum_all(g, &cls_terms)?;
    let cls = g.scale(cls, norm);
    let reg = if reg_terms.is_empty() {
        g.input(crate::tensor::Tensor::scalar(S::zero()))
    } else {
        let r = sum_all(g, &reg_terms)?;
        g.scale(r, norm)
    };
    let wc = g.scale(cls, S::of(cfg.cls_weight));
    let wr = g.scale(reg, S::of(cfg.reg_weight));
    let total = g.add(wc, wr)?;
    Ok(LossParts { total, cls, reg })
}

fn sum_all<S: Scalar>(g: &mut Graph<S>, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Contract("no loss terms".into()))?;
    rest.iter().try_fold(first, |acc, &t| g.add(acc, t))
}

#[cfg(test)]
mod tests;
