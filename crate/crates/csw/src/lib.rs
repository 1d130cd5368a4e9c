//! Community safety watch: cameras train a shared detection model without
//! their frames leaving the camera's fedlet.
//!
//! The parent fedlet keeps the global model in O1. Each camera pulls it into
//! O2, computes a gradient over its filtered frames (O6) into O3, and pushes
//! O3 masked into the parent's O4. The unmasked round sum lands in O5 and the
//! parent app folds it into O1.

mod apps;
mod data;
mod demo;
mod model;

pub use apps::{ChildApp, ParentApp, RoundRecord};
pub use data::{filter_frames, FrameFilter, GroundTruth, Sample, SampleBatch};
pub use demo::{csw_spec, Demo, DemoConfig, RoundLog, PARENT};
pub use model::{local_train, loss, Gradient, Model};

/// The app's declaration, as shipped.
pub const CSW_SPEC: &str = include_str!("../csw.spec");

pub const APP_ID: &str = "csw";

#[derive(Debug, thiserror::Error)]
pub enum CswError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("round {round} did not complete by {at_ms} ms")]
    Stalled { round: u64, at_ms: u64 },
}
