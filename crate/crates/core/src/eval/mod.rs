//! Decoding predictions into detections, Soft-NMS, and tIoU-based average
//! precision.

mod io;
mod metrics;
mod pipeline;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use io::{read_detections, write_detections};
pub use metrics::{
    average_precision, class_ap, map_report, threshold_range, EvalConfig, GroundTruth, MapReport, ThresholdGrid,
};
pub use pipeline::{ground_truth, predict_videos};

use crate::data::{ClassEntry, TextEmbeddingTable};
use crate::error::{Error, Result};
use crate::model::{decode_segment, LevelPrediction};
use crate::segment::tiou;
use crate::task::TaskId;
use crate::tensor::Scalar;

/// One localized instance, in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub task: TaskId,
    pub class: usize,
    pub onset: f64,
    pub offset: f64,
    pub score: f64,
}

impl Detection {
    pub fn segment(&self) -> (f64, f64) {
        (self.onset, self.offset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub score_floor: f64,
    pub pre_nms_topk: usize,
    pub sigma_nms: f64,
    pub min_score: f64,
    /// Detections kept per video after Soft-NMS.
    pub final_topk: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            score_floor: 0.001,
            pre_nms_topk: 2000,
            sigma_nms: 0.5,
            min_score: 0.001,
            final_topk: 100,
        }
    }
}

/// Where a prediction sits in time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VideoGeometry<'a> {
    pub video_id: &'a str,
    pub task: TaskId,
    pub stride_sec: f64,
    pub duration: f64,
    /// Moments whose cell starts at or past this row are padding.
    pub valid_len: usize,
}

/// Emit one detection per (level, moment, class) scoring at least
/// `score_floor`, clipped to the video, keeping the `pre_nms_topk` best.
pub fn decode<S: Scalar>(levels: &[LevelPrediction<S>], geo: &VideoGeometry, cfg: &DecodeConfig) -> Vec<Detection> {
    let mut out = Vec::new();
    for lv in levels {
        let (len, classes) = (lv.probs.shape()[0], lv.probs.shape()[1]);
        for t in 0..len {
            if t * lv.stride >= geo.valid_len {
                break;
            }
            let d = lv.dists.row(t);
            let (s, e) = decode_segment(t, lv.stride, d[0].f64(), d[1].f64());
            let onset = (s * geo.stride_sec).clamp(0.0, geo.duration);
            let offset = (e * geo.stride_sec).clamp(0.0, geo.duration);
            for (class, p) in lv.probs.row(t).iter().enumerate().take(classes) {
                let score = p.f64();
                if score >= cfg.score_floor {
                    out.push(Detection {
                        video_id: geo.video_id.to_string(),
                        task: geo.task,
                        class,
                        onset,
                        offset,
                        score,
                    });
                }
            }
        }
    }
    // stable: equal scores keep (level, moment, class) order
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(cfg.pre_nms_topk);
    out
}

/// Gaussian Soft-NMS within each (video, task, class) group, then the
/// `final_topk` best per video.
///
/// Each round selects the highest remaining score (ties go to the earlier
/// input) and multiplies every other remaining score in its group by
/// `exp(-tiou^2 / sigma_nms)`. A group stops once its best remaining score
/// falls below `min_score`. Output is sorted by score, descending.
pub fn soft_nms(dets: &[Detection], cfg: &DecodeConfig) -> Vec<Detection> {
    let mut groups: BTreeMap<(&str, TaskId, usize), Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry((&d.video_id, d.task, d.class)).or_default().push(i);
    }
    let mut kept: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for ((video, _, _), members) in groups {
        let mut live: Vec<(usize, f64)> = members.iter().map(|&i| (i, dets[i].score)).collect();
        let out = kept.entry(video).or_default();
        while !live.is_empty() {
            let mut best = 0;
            for k in 1..live.len() {
                if live[k].1 > live[best].1 {
                    best = k;
                }
            }
            let (i, score) = live.remove(best);
            if score < cfg.min_score {
                break;
            }
            out.push((i, score));
            let seg = dets[i].segment();
            for (j, s) in &mut live {
                let o = tiou(seg, dets[*j].segment());
                *s *= (-o * o / cfg.sigma_nms).exp();
            }
        }
    }
    let mut result = Vec::new();
    for (_, mut list) in kept {
        list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        list.truncate(cfg.final_topk);
        result.extend(list.into_iter().map(|(i, score)| Detection {
            score,
            ..dets[i].clone()
        }));
    }
    result.sort_by(|a, b| b.score.total_cmp(&a.score));
    result
}

/// Extra class for inference-time vocabulary extension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtraClass {
    pub name: String,
    pub prompt: TaskId,
    pub embedding: Vec<f32>,
}

/// The original classes followed by `extra`, in order.
pub fn extend_vocabulary(table: &TextEmbeddingTable, extra: &[ExtraClass]) -> Result<TextEmbeddingTable> {
    let mut out = table.clone();
    for e in extra {
        if e.embedding.len() != table.dim() {
            return Err(Error::Config(format!(
                "extra class `{}` is {}-dim, vocabulary is {}-dim",
                e.name,
                e.embedding.len(),
                table.dim()
            )));
        }
        out.push(ClassEntry {
            name: e.name.clone(),
            prompt: e.prompt,
            embedding: e.embedding.clone(),
        })?;
    }
    Ok(out)
}
