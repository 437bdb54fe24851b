//! Detection files: one tab-separated record per line with video id, task,
//! class name, onset, offset and score, numbers to 6 decimals.

use std::fmt::Write as _;
use std::path::Path;

use super::Detection;
use crate::error::{Error, Result};

pub fn format_detections(dets: &[Detection], class_names: &[&str]) -> Result<String> {
    let mut out = String::new();
    for d in dets {
        if d.video_id.contains(['\t', '\n', '\r']) {
            return Err(Error::Data(format!(
                "video id {:?} contains a tab or newline",
                d.video_id
            )));
        }
        let name = class_names
            .get(d.class)
            .ok_or_else(|| Error::Data(format!("class index {} has no name", d.class)))?;
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            d.video_id,
            d.task.name(),
            name,
            d.onset,
            d.offset,
            d.score
        );
    }
    Ok(out)
}

pub fn write_detections(path: &Path, dets: &[Detection], class_names: &[&str]) -> Result<()> {
    let text = format_detections(dets, class_names)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_detections(path: &Path, class_names: &[&str]) -> Result<Vec<Detection>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, detail: String| Error::Parse {
        context: format!("{}:{}", path.display(), line + 1),
        detail,
    };
    let mut dets = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [video, task, class, onset, offset, score] = fields[..] else {
            return Err(parse_err(
                i,
                format!("expected 6 tab-separated fields, got {}", fields.len()),
            ));
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(i, format!("`{s}`: {e}")));
        let class = class_names
            .iter()
            .position(|n| *n == class)
            .ok_or_else(|| parse_err(i, format!("unknown class `{class}`")))?;
        dets.push(Detection {
            video_id: video.to_string(),
            task: task.parse()?,
            class,
            onset: num(onset)?,
            offset: num(offset)?,
            score: num(score)?,
        });
    }
    Ok(dets)
}
