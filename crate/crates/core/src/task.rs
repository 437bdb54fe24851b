use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// The three localization tasks. Declaration order is the round-robin order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    /// Temporal action localization (visual actions).
    Tal,
    /// Audio-visual event localization.
    Avel,
    /// Sound event detection.
    Sed,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Tal, TaskId::Avel, TaskId::Sed];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Tal => "tal",
            TaskId::Avel => "avel",
            TaskId::Sed => "sed",
        }
    }

    /// Sentence template wrapped around a class label before text encoding.
    pub fn prompt_template(self) -> &'static str {
        match self {
            TaskId::Tal => "A visual event of {label}.",
            TaskId::Avel => "An audio visual event of {label}.",
            TaskId::Sed => "A sound event of {label}.",
        }
    }

    pub fn prompt(self, label: &str) -> String {
        self.prompt_template().replace("{label}", label)
    }

    /// Seconds per feature step: 0.5 s for action videos, 0.25 s otherwise.
    pub fn default_stride_sec(self) -> f64 {
        match self {
            TaskId::Tal => 0.5,
            TaskId::Avel | TaskId::Sed => 0.25,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name().to_uppercase())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tal" => Ok(TaskId::Tal),
            "avel" => Ok(TaskId::Avel),
            "sed" => Ok(TaskId::Sed),
            other => Err(Error::Config(format!(
                "unknown task `{other}` (expected tal, avel or sed)"
            ))),
        }
    }
}
