use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// One annotated instance, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub onset: f64,
    pub offset: f64,
    pub class: usize,
}

/// An annotation converted to input-grid units (feature steps).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSegment {
    pub start: f64,
    pub end: f64,
    pub class: usize,
}

impl GridSegment {
    fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// Length, stride and regression range `[lo, hi)` of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGeometry {
    pub len: usize,
    pub stride: usize,
    pub range: (f64, f64),
}

impl LevelGeometry {
    pub fn center(&self, t: usize) -> f64 {
        (t as f64 + 0.5) * self.stride as f64
    }
}

pub fn pyramid_geometry(cfg: &ModelConfig, seq_len: usize) -> Vec<LevelGeometry> {
    (1..=cfg.fusion_layers)
        .map(|l| LevelGeometry {
            len: seq_len >> l,
            stride: 1 << l,
            range: cfg.regression_range(l),
        })
        .collect()
}

/// Convert annotations from seconds to grid units, rejecting any that fall
/// outside `[0, seq_len]`.
pub fn to_grid(annotations: &[Annotation], stride_sec: f64, seq_len: usize) -> Result<Vec<GridSegment>> {
    annotations
        .iter()
        .map(|a| {
            let start = a.onset / stride_sec;
            let end = a.offset / stride_sec;
            if !(0.0 <= start && start <= end && end <= seq_len as f64) {
                return Err(Error::Data(format!(
                    "annotation [{}, {}] s is outside [0, {seq_len}] grid steps at {stride_sec} s/step",
                    a.onset, a.offset
                )));
            }
            Ok(GridSegment {
                start,
                end,
                class: a.class,
            })
        })
        .collect()
}

/// Training targets for one pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelTargets {
    pub len: usize,
    pub num_classes: usize,
    /// Moments whose cell starts before the padded tail.
    pub valid: Vec<bool>,
    pub positive: Vec<bool>,
    /// Row-major `[len, num_classes]` in `{0, 1}`.
    pub classes: Vec<f64>,
    /// `(start, end)` distances in stride units; zero on negatives.
    pub dists: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentTarget {
    pub levels: Vec<LevelTargets>,
}

impl AssignmentTarget {
    pub fn num_positive(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.positive.iter().filter(|&&p| p).count())
            .sum()
    }
}

/// Label every pyramid moment.
///
/// A moment is positive for a segment when its centre lies inside the
/// segment (boundaries included) and the larger of its two distances falls in
/// the level's regression range. It takes the classes of all such segments.
/// Its regression target is the segment whose centre is nearest; ties go to
/// the shorter segment, then to the earlier one in `(start, end, class)`
/// order, so the result does not depend on annotation order.
#[allow(clippy::needless_range_loop)]
pub fn assign_targets(
    segments: &[GridSegment],
    geometry: &[LevelGeometry],
    valid_len: usize,
    num_classes: usize,
) -> Result<AssignmentTarget> {
    if let Some(s) = segments.iter().find(|s| s.class >= num_classes) {
        return Err(Error::Data(format!(
            "class index {} out of {num_classes} classes",
            s.class
        )));
    }
    let mut ordered = segments.to_vec();
    ordered.sort_by(|a, b| {
        (a.start, a.end, a.class)
            .partial_cmp(&(b.start, b.end, b.class))
            .expect("finite segment bounds")
    });

    let levels = geometry
        .iter()
        .map(|geo| {
            let n = geo.len;
            let s = geo.stride as f64;
            let mut lt = LevelTargets {
                len: n,
                num_classes,
                valid: (0..n).map(|t| t * geo.stride < valid_len).collect(),
                positive: vec![false; n],
                classes: vec![0.0; n * num_classes],
                dists: vec![[0.0; 2]; n],
            };
            // (distance to segment centre, segment length) of the current pick
            let mut best: Vec<Option<(f64, f64)>> = vec![None; n];
            for seg in &ordered {
                // moments t with start <= (t + 0.5) s <= end
                let first = (seg.start / s - 0.5).ceil().max(0.0) as usize;
                let last = (seg.end / s - 0.5).floor();
                if last < 0.0 {
                    continue;
                }
                let last = (last as usize).min(n.saturating_sub(1));
                for t in first..=last.min(n.saturating_sub(1)) {
                    if t >= n || !lt.valid[t] {
                        continue;
                    }
                    let c = geo.center(t);
                    let (ds, de) = (c - seg.start, seg.end - c);
                    let reach = ds.max(de);
                    if !(geo.range.0 <= reach && reach < geo.range.1) {
                        continue;
                    }
                    lt.positive[t] = true;
                    lt.classes[t * num_classes + seg.class] = 1.0;
                    let key = ((c - seg.center()).abs(), seg.end - seg.start);
                    if best[t].is_none_or(|b| key < b) {
                        best[t] = Some(key);
                        lt.dists[t] = [ds / s, de / s];
                    }
                }
            }
            lt
        })
        .collect();
    Ok(AssignmentTarget { levels })
}
