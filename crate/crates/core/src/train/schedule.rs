use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::TaskId;

/// Endless seeded batches over one task's dataset. The order is reshuffled
/// on every pass; the last batch of a pass may be short.
#[derive(Clone, Debug)]
pub struct TaskStream {
    len: usize,
    batch: usize,
    order: Vec<usize>,
    pos: usize,
    passes: usize,
    rng: ChaCha8Rng,
}

impl TaskStream {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            len,
            batch,
            order: (0..len).collect(),
            pos: 0,
            passes: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos >= self.len {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.len);
        let out = self.order[self.pos..end].to_vec();
        self.pos = end;
        if end == self.len {
            self.passes += 1;
        }
        out
    }

    /// Completed passes over the dataset.
    pub fn passes(&self) -> usize {
        self.passes
    }
}

/// Fixed-order multi-task batch sampler: every cycle visits the tasks in
/// `TaskId` order and draws one batch from each task that trains this cycle.
#[derive(Clone, Debug)]
pub struct RoundRobin {
    streams: Vec<(TaskId, TaskStream)>,
}

impl RoundRobin {
    /// `sizes` gives the number of training items per task; empty tasks are
    /// dropped.
    pub fn new(sizes: &[(TaskId, usize)], batch: usize, seed: u64) -> Result<Self> {
        let mut tasks: Vec<(TaskId, usize)> = sizes.iter().copied().filter(|&(_, n)| n > 0).collect();
        tasks.sort_by_key(|&(t, _)| t);
        if tasks.is_empty() {
            return Err(Error::Config("no task has training data".into()));
        }
        let streams = tasks
            .into_iter()
            .map(|(t, n)| (t, TaskStream::new(n, batch, seed ^ (0x9e37_79b9 * (t as u64 + 1)))))
            .collect();
        Ok(Self { streams })
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        self.streams.iter().map(|(t, _)| *t).collect()
    }

    /// Batches for one cycle, restricted to tasks accepted by `trains`.
    pub fn cycle(&mut self, mut trains: impl FnMut(TaskId) -> bool) -> Vec<(TaskId, Vec<usize>)> {
        self.streams
            .iter_mut()
            .filter(|(t, _)| trains(*t))
            .map(|(t, s)| (*t, s.next_batch()))
            .collect()
    }

    pub fn passes(&self, task: TaskId) -> usize {
        self.streams
            .iter()
            .find(|(t, _)| *t == task)
            .map_or(0, |(_, s)| s.passes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StopGoConfig {
    pub enabled: bool,
    /// Relative validation-loss improvement that counts as progress.
    pub min_improvement: f64,
    /// Epochs without progress before a task stops.
    pub patience: usize,
    /// A stopped task trains on one cycle out of this many.
    pub duty: usize,
    /// Relative worsening over the best loss that restarts a stopped task.
    pub regress: f64,
}

impl Default for StopGoConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            min_improvement: 0.001,
            patience: 1,
            duty: 4,
            regress: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Go,
    Stop,
}

/// Stop-and-go state of one task, driven by its validation loss.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSchedule {
    pub mode: Mode,
    pub best: f64,
    pub stale_epochs: usize,
    /// Cycles seen since entering stop.
    pub stop_cycles: usize,
}

impl Default for TaskSchedule {
    fn default() -> Self {
        Self {
            mode: Mode::Go,
            best: f64::INFINITY,
            stale_epochs: 0,
            stop_cycles: 0,
        }
    }
}

impl TaskSchedule {
    /// Whether the task trains in the current cycle; advances the duty
    /// counter.
    pub fn trains(&mut self, cfg: &StopGoConfig) -> bool {
        match self.mode {
            Mode::Go => true,
            Mode::Stop => {
                let on = self.stop_cycles.is_multiple_of(cfg.duty.max(1));
                self.stop_cycles += 1;
                on
            }
        }
    }

    /// Feed one epoch's validation loss.
    pub fn update(&mut self, val_loss: f64, cfg: &StopGoConfig) {
        if !cfg.enabled {
            return;
        }
        let improved = val_loss < self.best * (1.0 - cfg.min_improvement);
        match self.mode {
            Mode::Go => {
                if improved {
                    self.stale_epochs = 0;
                } else {
                    self.stale_epochs += 1;
                    if self.stale_epochs >= cfg.patience {
                        self.mode = Mode::Stop;
                        self.stop_cycles = 0;
                    }
                }
            }
            Mode::Stop => {
                if val_loss > self.best * (1.0 + cfg.regress) {
                    self.mode = Mode::Go;
                    self.stale_epochs = 0;
                }
            }
        }
        if val_loss < self.best {
            self.best = val_loss;
        }
    }
}
