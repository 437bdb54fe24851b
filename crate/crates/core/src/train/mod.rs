//! Optimization: Adam, the learning-rate schedule, round-robin multi-task
//! sampling, stop-and-go throttling and the epoch loop.

mod adam;
mod schedule;
mod trainer;

pub use adam::{lr_at, Adam, OptimConfig};
pub use schedule::{Mode, RoundRobin, StopGoConfig, TaskSchedule, TaskStream};
pub use trainer::{
    batch_gradients, build_model, dataset_loss, mode_tasks, train, video_target, EpochRecord, TrainMode, TrainOutcome,
    METRICS_FILE,
};
