use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::Detection;
use crate::error::{Error, Result};
use crate::segment::tiou;
use crate::task::TaskId;

/// One annotated instance for evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub class: usize,
    pub onset: f64,
    pub offset: f64,
}

/// Reported columns and the grid averaged into the summary number.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdGrid {
    pub report: Vec<f64>,
    pub average: Vec<f64>,
}

/// `start, start + step, ..., end`, rounded to 6 decimals so grids compare
/// exactly.
pub fn threshold_range(start: f64, step: f64, end: f64) -> Vec<f64> {
    let n = ((end - start) / step).round() as usize;
    (0..=n)
        .map(|i| ((start + i as f64 * step) * 1e6).round() / 1e6)
        .collect()
}

impl ThresholdGrid {
    pub fn for_task(task: TaskId) -> Self {
        match task {
            TaskId::Tal => Self {
                report: vec![0.5, 0.75, 0.95],
                average: threshold_range(0.5, 0.05, 0.95),
            },
            TaskId::Avel => Self {
                report: threshold_range(0.5, 0.1, 0.9),
                average: threshold_range(0.1, 0.1, 0.9),
            },
            TaskId::Sed => Self {
                report: threshold_range(0.5, 0.2, 0.9),
                average: threshold_range(0.1, 0.1, 0.9),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in [&self.report, &self.average] {
            let ok = !g.is_empty() && g.iter().all(|&t| t > 0.0 && t <= 1.0) && g.windows(2).all(|w| w[0] < w[1]);
            if !ok {
                return Err(Error::Config(format!(
                    "tIoU thresholds must be non-empty, strictly increasing and in (0, 1]: {g:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tal: ThresholdGrid,
    pub avel: ThresholdGrid,
    pub sed: ThresholdGrid,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tal: ThresholdGrid::for_task(TaskId::Tal),
            avel: ThresholdGrid::for_task(TaskId::Avel),
            sed: ThresholdGrid::for_task(TaskId::Sed),
        }
    }
}

impl EvalConfig {
    pub fn grid(&self, task: TaskId) -> &ThresholdGrid {
        match task {
            TaskId::Tal => &self.tal,
            TaskId::Avel => &self.avel,
            TaskId::Sed => &self.sed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        TaskId::ALL.iter().try_for_each(|&t| self.grid(t).validate())
    }
}

/// AP of one class at one tIoU threshold, or `None` when the class has no
/// ground truth.
///
/// Detections are ranked by score, ties by onset then video id. Each takes
/// the unmatched ground truth of its video with the highest tIoU, if that
/// reaches `threshold`. The precision envelope is integrated over every
/// recall point.
pub fn class_ap(dets: &[Detection], gts: &[GroundTruth], class: usize, threshold: f64) -> Option<f64> {
    let mut by_video: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    let mut total = 0usize;
    for g in gts.iter().filter(|g| g.class == class) {
        by_video.entry(&g.video_id).or_default().push((g.onset, g.offset));
        total += 1;
    }
    if total == 0 {
        return None;
    }
    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class == class).collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.onset.total_cmp(&b.onset))
            .then(a.video_id.cmp(&b.video_id))
    });
    let mut used: BTreeMap<&str, Vec<bool>> = by_video.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (rank, d) in ranked.iter().enumerate() {
        if let Some(segs) = by_video.get(d.video_id.as_str()) {
            let flags = used.get_mut(d.video_id.as_str()).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (k, &s) in segs.iter().enumerate() {
                if flags[k] {
                    continue;
                }
                let o = tiou(d.segment(), s);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((k, o));
                }
            }
            if let Some((k, _)) = best {
                flags[k] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / total as f64, tp as f64 / (rank + 1) as f64));
    }
    // all-point interpolation over the monotone precision envelope
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut next_recall = points.last().map_or(0.0, |p| p.0);
    for &(recall, precision) in points.iter().rev() {
        ap += (next_recall - recall) * envelope;
        envelope = envelope.max(precision);
        next_recall = recall;
    }
    ap += next_recall * envelope;
    Some(ap)
}

/// Mean AP over the classes that have ground truth; 0 when none do.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], threshold: f64) -> f64 {
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    if classes.is_empty() {
        return 0.0;
    }
    let sum: f64 = classes.iter().filter_map(|&c| class_ap(dets, gts, c, threshold)).sum();
    sum / classes.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub task: TaskId,
    /// `(threshold, mAP)` for each reported column.
    pub columns: Vec<(f64, f64)>,
    /// Mean of mAP over the averaging grid.
    pub average: f64,
    /// Per-class AP at each reported threshold, for classes with ground truth.
    pub per_class: BTreeMap<usize, Vec<f64>>,
}

pub fn map_report(dets: &[Detection], gts: &[GroundTruth], grid: &ThresholdGrid, task: TaskId) -> MapReport {
    let columns = grid
        .report
        .iter()
        .map(|&t| (t, average_precision(dets, gts, t)))
        .collect();
    let average = grid
        .average
        .iter()
        .map(|&t| average_precision(dets, gts, t))
        .sum::<f64>()
        / grid.average.len().max(1) as f64;
    let classes: BTreeSet<usize> = gts.iter().map(|g| g.class).collect();
    let per_class = classes
        .into_iter()
        .map(|c| {
            let aps = grid
                .report
                .iter()
                .map(|&t| class_ap(dets, gts, c, t).unwrap_or(0.0))
                .collect();
            (c, aps)
        })
        .collect();
    MapReport {
        task,
        columns,
        average,
        per_class,
    }
}

impl MapReport {
    /// mAP at `threshold` if it is a reported column.
    pub fn at(&self, threshold: f64) -> Option<f64> {
        self.columns
            .iter()
            .find(|(t, _)| (t - threshold).abs() < 1e-9)
            .map(|&(_, m)| m)
    }

    /// Plain-text table in percent, one row for the task plus one per class.
    pub fn table(&self, class_names: &[&str]) -> String {
        let mut s = format!("{:<24}", self.task.to_string());
        for (t, _) in &self.columns {
            let _ = write!(s, " {:>7}", format!("{t}"));
        }
        s.push_str("     Avg\n");
        let _ = write!(s, "{:<24}", "mAP");
        for (_, m) in &self.columns {
            let _ = write!(s, " {:>7.2}", 100.0 * m);
        }
        let _ = writeln!(s, " {:>7.2}", 100.0 * self.average);
        for (c, aps) in &self.per_class {
            let name = class_names.get(*c).copied().unwrap_or("?");
            let _ = write!(s, "  {:<22}", name);
            for ap in aps {
                let _ = write!(s, " {:>7.2}", 100.0 * ap);
            }
            s.push('\n');
        }
        s
    }
}
