//! Unified audio-visual temporal event localization.
//!
//! One network jointly localizes visual actions, sound events and
//! audio-visual events from pre-extracted visual and audio feature
//! sequences. The crate contains everything needed to train and evaluate it
//! at desk scale:
//!
//! - [`tensor`]: dense tensors with tape-based reverse-mode autodiff
//! - [`nn`]: parameters, attention, task-switched expert FFNs, transformer blocks
//! - [`model`]: the audio-visual pyramid encoder and the two prediction heads
//! - [`loss`]: target assignment, sigmoid focal loss and 1-D gIoU loss
//! - [`eval`]: decoding, Soft-NMS, tIoU-based average precision
//! - [`train`]: Adam, learning-rate schedule, round-robin multi-task training
//! - [`data`]: feature files, manifests, vocabularies, checkpoints, synthetic data

// NaN-rejecting checks are written as `!(x > y)` on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod segment;
pub mod task;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use task::TaskId;
pub use tensor::{Scalar, Tape, Tensor, Var};
