use rayon::prelude::*;

use super::{decode, soft_nms, DecodeConfig, Detection, GroundTruth, VideoGeometry};
use crate::data::{TextEmbeddingTable, VideoItem};
use crate::error::Result;
use crate::model::UniAv;
use crate::task::TaskId;

/// Decode and Soft-NMS every video under `task` with the given vocabulary.
/// Videos run in parallel; output order does not depend on thread count.
pub fn predict_videos(
    model: &UniAv<f32>,
    videos: &[&VideoItem],
    task: TaskId,
    table: &TextEmbeddingTable,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    let text = table.matrix::<f32>();
    let per_video: Vec<Result<Vec<Detection>>> = videos
        .par_iter()
        .map(|v| {
            let levels = model.predict(&v.visual, &v.audio, task, &text)?;
            let geo = VideoGeometry {
                video_id: &v.id,
                task,
                stride_sec: v.stride_sec,
                duration: v.duration,
                valid_len: v.valid_len,
            };
            Ok(soft_nms(&decode(&levels, &geo, cfg), cfg))
        })
        .collect();
    let mut out = Vec::new();
    for r in per_video {
        out.extend(r?);
    }
    Ok(out)
}

/// Ground truth of `videos`, with class indices offset by `class_offset`
/// (used when a task's classes sit after another vocabulary).
pub fn ground_truth(videos: &[&VideoItem], class_offset: usize) -> Vec<GroundTruth> {
    videos
        .iter()
        .flat_map(|v| {
            v.annotations.iter().map(move |a| GroundTruth {
                video_id: v.id.clone(),
                class: a.class + class_offset,
                onset: a.onset,
                offset: a.offset,
            })
        })
        .collect()
}
