//! Data-augmentation toolkit that turns caption-less driving videos into
//! vision-and-language navigation (VLN) training data.
//!
//! The stages, in pipeline order:
//!
//! 1. [`template_engine`] extracts instruction templates from a human-written
//!    corpus, masks noun phrases with an `<OBJECT>` slot and keeps the
//!    lowest-loss fraction of each category.
//! 2. [`action_predictor`] labels consecutive frames FORWARD / LEFT / RIGHT by
//!    rotating the later frame and comparing windowed mean squared error.
//! 3. [`detection_store`] loads per-frame object detections, drops blocked
//!    classes and picks fill objects.
//! 4. [`trajectory_builder`] samples frames, merges actions into segments and
//!    writes one templated sentence per segment.
//! 5. [`pretrain_data`] emits MLM / ITM / NAP proxy-task samples.
//! 6. [`navgraph_metrics`] derives actions from heading changes on a
//!    navigation graph and scores trajectories with TC / SPD / SED.
//!
//! [`synthetic`] generates panning frame sequences and fixture clips with
//! known ground-truth turns.

pub mod action_predictor;
pub mod detection_store;
pub mod error;
pub mod jsonl;
pub mod navgraph_metrics;
pub mod pretrain_data;
pub mod seed;
pub mod synthetic;
pub mod template_engine;
pub mod trajectory_builder;

pub use action_predictor::{FrameImage, RotationConfig, TurnLabel};
pub use error::{Error, Result};
