use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{lr_at, Adam, Mode, RoundRobin, TaskSchedule};
use crate::config::RunConfig;
use crate::data::{save_checkpoint, Checkpoint, Dataset, LoadMode, Split, VideoItem, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{ground_truth, map_report, predict_videos, MapReport};
use crate::loss::{assign_targets, item_loss, pyramid_geometry, to_grid, AssignmentTarget, LossConfig};
use crate::model::{ModelConfig, UniAv};
use crate::nn::{Grads, Graph};
use crate::task::TaskId;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.jsonl";

/// Training regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// One task, one expert set.
    SingleTask(TaskId),
    /// All configured tasks with round-robin sampling.
    MultiTask,
    /// Continue a multi-task checkpoint on one task's data.
    Finetune(TaskId),
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMode::SingleTask(t) => write!(f, "st:{}", t.name()),
            TrainMode::MultiTask => f.write_str("at"),
            TrainMode::Finetune(t) => write!(f, "ft:{}", t.name()),
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "at" => Ok(TrainMode::MultiTask),
            Some(("st", t)) => Ok(TrainMode::SingleTask(t.parse()?)),
            Some(("ft", t)) => Ok(TrainMode::Finetune(t.parse()?)),
            _ => Err(Error::Config(format!(
                "unknown training mode `{s}` (st:<task>, at, ft:<task>)"
            ))),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task: TaskId,
    /// Stop-and-go mode the task trained under during this epoch.
    pub mode: Mode,
    pub steps: usize,
    /// Mean batch loss over this epoch's steps; absent when the task took none.
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    /// Learning rate at the last cycle of the epoch.
    pub lr: f64,
    pub map: Option<MapReport>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: UniAv<f32>,
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

/// The model a regime starts from. Finetuning requires `init` and keeps its
/// full configuration; single-task runs accept a multi-task `init` and take
/// only their own experts from it.
pub fn build_model(cfg: &ModelConfig, mode: TrainMode, init: Option<&Checkpoint>, seed: u64) -> Result<UniAv<f32>> {
    let (model_cfg, load) = match mode {
        TrainMode::SingleTask(t) => {
            let base = init.map_or(cfg, |c| &c.config);
            (base.clone().with_tasks(&[t]), LoadMode::Partial)
        }
        TrainMode::MultiTask => (init.map_or(cfg, |c| &c.config).clone(), LoadMode::Strict),
        TrainMode::Finetune(t) => {
            let c = init.ok_or_else(|| Error::Config("finetuning needs an initial checkpoint".into()))?;
            if !c.config.tasks.contains(&t) {
                return Err(Error::Load(format!("checkpoint has no `{}` experts", t.name())));
            }
            (c.config.clone(), LoadMode::Strict)
        }
    };
    let mut model = UniAv::new(model_cfg, seed)?;
    if let Some(c) = init {
        c.load_into(&mut model, load)?;
    }
    Ok(model)
}

/// Tasks a regime trains on, in round-robin order.
pub fn mode_tasks(mode: TrainMode, cfg: &ModelConfig) -> Vec<TaskId> {
    match mode {
        TrainMode::SingleTask(t) | TrainMode::Finetune(t) => vec![t],
        TrainMode::MultiTask => {
            let mut t = cfg.tasks.clone();
            t.sort();
            t
        }
    }
}

/// Assignment targets of one video under `cfg`.
pub fn video_target(cfg: &ModelConfig, video: &VideoItem, num_classes: usize) -> Result<AssignmentTarget> {
    let grid = to_grid(&video.annotations, video.stride_sec, video.len())?;
    let geometry = pyramid_geometry(cfg, video.len());
    assign_targets(&grid, &geometry, video.valid_len, num_classes)
}

struct TaskData<'a> {
    task: TaskId,
    train: Vec<&'a VideoItem>,
    train_targets: Vec<AssignmentTarget>,
    val: Vec<&'a VideoItem>,
    val_targets: Vec<AssignmentTarget>,
    text: Tensor<f32>,
}

fn targets(cfg: &ModelConfig, videos: &[&VideoItem], classes: usize) -> Result<Vec<AssignmentTarget>> {
    videos.iter().map(|v| video_target(cfg, v, classes)).collect()
}

/// Summed loss and gradients of a batch, each item normalized by the batch's
/// positive count. Items run in parallel; the reduction is sequential in
/// batch order, so the result does not depend on the thread count.
pub fn batch_gradients(
    model: &UniAv<f32>,
    task: TaskId,
    text: &Tensor<f32>,
    items: &[(&VideoItem, &AssignmentTarget)],
    loss: &LossConfig,
) -> Result<(f64, Grads<f32>)> {
    let normalizer = items.iter().map(|(_, t)| t.num_positive()).sum::<usize>() as f64;
    let per_item: Vec<Result<(f64, Grads<f32>)>> = items
        .par_iter()
        .map(|(video, target)| {
            let mut g = Graph::new(&model.params);
            let v = g.input(video.visual.clone());
            let a = g.input(video.audio.clone());
            let t = g.input(text.clone());
            let outs = model.forward(&mut g, v, a, task, t)?;
            let parts = item_loss(&mut g, &outs, target, loss, normalizer)?;
            let value = g.value(parts.total).item() as f64;
            Ok((value, g.backward(parts.total)?))
        })
        .collect();
    let mut total = 0.0;
    let mut grads = Grads::empty(model.params.len());
    for r in per_item {
        let (l, g) = r?;
        total += l;
        grads.accumulate(&g);
    }
    Ok((total, grads))
}

/// Loss over a whole split, normalized by its total positive count.
pub fn dataset_loss(
    model: &UniAv<f32>,
    task: TaskId,
    text: &Tensor<f32>,
    videos: &[&VideoItem],
    targets: &[AssignmentTarget],
    loss: &LossConfig,
) -> Result<f64> {
    let per_item: Vec<Result<f64>> = videos
        .par_iter()
        .zip(targets)
        .map(|(video, target)| {
            let mut g = Graph::inference(&model.params);
            let v = g.input(video.visual.clone());
            let a = g.input(video.audio.clone());
            let t = g.input(text.clone());
            let outs = model.forward(&mut g, v, a, task, t)?;
            let parts = item_loss(&mut g, &outs, target, loss, 1.0)?;
            Ok(g.value(parts.total).item() as f64)
        })
        .collect();
    let mut sum = 0.0;
    for r in per_item {
        sum += r?;
    }
    let positives = targets.iter().map(AssignmentTarget::num_positive).sum::<usize>();
    Ok(sum / positives.max(1) as f64)
}

/// Run the full recipe. With `out_dir`, writes `epoch_NNN` checkpoints and
/// appends one metrics record per (epoch, task) to `metrics.jsonl`.
pub fn train(
    run: &RunConfig,
    mode: TrainMode,
    data: &Dataset,
    vocab: &Vocabulary,
    init: Option<&Checkpoint>,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    run.validate()?;
    let oc = &run.optim;
    let mut model = build_model(&run.model, mode, init, oc.seed)?;
    let tasks = mode_tasks(mode, model.config());

    let mut per_task = Vec::new();
    for &task in &tasks {
        let table = vocab.get(task)?;
        let train = data.select(task, Split::Train);
        let val = data.select(task, Split::Val);
        per_task.push(TaskData {
            task,
            train_targets: targets(model.config(), &train, table.len())?,
            val_targets: targets(model.config(), &val, table.len())?,
            train,
            val,
            text: table.matrix(),
        });
    }
    let sizes: Vec<(TaskId, usize)> = per_task.iter().map(|d| (d.task, d.train.len())).collect();
    let mut rr = RoundRobin::new(&sizes, oc.batch_size, oc.seed)?;
    let cycles_per_epoch = sizes.iter().map(|&(_, n)| n.div_ceil(oc.batch_size)).max().unwrap_or(0);
    let total = cycles_per_epoch * oc.epochs;
    let warmup = cycles_per_epoch * oc.warmup_epochs;

    let mut adam = Adam::new(oc, model.params.len());
    let mut sched: BTreeMap<TaskId, TaskSchedule> = tasks.iter().map(|&t| (t, TaskSchedule::default())).collect();
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(METRICS_FILE);
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();

    for epoch in 0..oc.epochs {
        let modes: BTreeMap<TaskId, Mode> = sched.iter().map(|(&t, s)| (t, s.mode)).collect();
        let mut sums: BTreeMap<TaskId, (usize, f64)> = BTreeMap::new();
        let mut lr = 0.0;
        for c in 0..cycles_per_epoch {
            lr = lr_at(epoch * cycles_per_epoch + c, total, warmup, oc.lr);
            let batches = rr.cycle(|t| sched.get_mut(&t).is_some_and(|s| s.trains(&run.schedule)));
            for (task, idx) in batches {
                let d = per_task
                    .iter()
                    .find(|d| d.task == task)
                    .expect("sampler only yields known tasks");
                let items: Vec<_> = idx.iter().map(|&i| (d.train[i], &d.train_targets[i])).collect();
                let (loss, grads) = batch_gradients(&model, task, &d.text, &items, &run.loss)?;
                adam.step(&mut model.params, &grads, lr, task.name())?;
                let e = sums.entry(task).or_default();
                e.0 += 1;
                e.1 += loss;
            }
        }

        for d in &per_task {
            let (steps, sum) = sums.get(&d.task).copied().unwrap_or_default();
            let (val_loss, map) = if d.val.is_empty() {
                (None, None)
            } else {
                let vl = dataset_loss(&model, d.task, &d.text, &d.val, &d.val_targets, &run.loss)?;
                let table = vocab.get(d.task)?;
                let dets = predict_videos(&model, &d.val, d.task, table, &run.decode)?;
                let gts = ground_truth(&d.val, 0);
                (Some(vl), Some(map_report(&dets, &gts, run.eval.grid(d.task), d.task)))
            };
            if let Some(vl) = val_loss {
                sched
                    .get_mut(&d.task)
                    .expect("schedule per task")
                    .update(vl, &run.schedule);
            }
            let record = EpochRecord {
                epoch: epoch + 1,
                task: d.task,
                mode: modes[&d.task],
                steps,
                train_loss: (steps > 0).then(|| sum / steps as f64),
                val_loss,
                lr,
                map,
            };
            if let Some((file, path)) = metrics.as_mut() {
                let line = serde_json::to_string(&record).map_err(|e| Error::Parse {
                    context: "metrics record".into(),
                    detail: e.to_string(),
                })?;
                writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            progress(&record);
            history.push(record);
        }

        if let Some(dir) = out_dir {
            let ckpt = Checkpoint::from_model(&model, epoch + 1, Some(adam.export(&model.params)));
            checkpoints.push(save_checkpoint(dir, &format!("epoch_{:03}", epoch + 1), &ckpt)?);
        }
    }

    Ok(TrainOutcome {
        model,
        history,
        checkpoints,
    })
}
