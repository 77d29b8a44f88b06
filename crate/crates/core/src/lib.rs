//! Streaming test-time adaptation for LiDAR point-cloud segmentation.
//!
//! A frozen source model labels each incoming frame. Its predictions are
//! refined with neighborhood voting, filtered by class prototypes, and used
//! together with a cross-frame consistency term to update a copy of the model
//! one frame at a time.

pub mod benchmark;
pub mod domain;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod model;
pub mod par;
pub mod prototype;
pub mod pseudo_label;
pub mod spatial;
pub mod stream;
pub mod temporal;

pub use domain::{
    ClassId, ClassMap, ConfidenceField, Frame, Label, LabelField, Point, Pose, ProbabilityField,
    SelectionMask, IGNORE,
};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use par::ExecMode;
