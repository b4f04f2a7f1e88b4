//! Tracking metrics, benchmark runs, and reports.
//!
//! Precision rate (PR) is the percentage of frames whose center error is
//! below 20 px. Normalized precision rate (NPR) averages, over 51 thresholds
//! in `[0, 0.5]`, the percentage of frames whose center error divided by the
//! ground-truth diagonal is at most the threshold. Success rate (SR)
//! averages, over IoU thresholds `0, 0.05, ..., 1`, the percentage of frames
//! whose IoU exceeds the threshold, so an all-miss run scores exactly 0.

mod bench;
mod metrics;
pub mod plot;
mod report;

pub use bench::{
    run_benchmark, track_sequence, BenchmarkConfig, FrameOutcome, FrameTracker, OracleTracker, SequenceInput,
    SurrogateTracker,
};
pub use metrics::{
    iou, norm_precision_curve, norm_precision_rate, precision_at, precision_curve, precision_rate,
    success_curve, success_rate, FrameRecord, Metrics, NPR_MAX, NPR_POINTS, PR_THRESHOLD_PX, SR_POINTS,
};
pub use report::{read_report, write_report, BenchmarkReport, SequenceReport, Timing};

use thiserror::Error;

use crate::attacks::AttackError;
use crate::eventcam::EventError;
use crate::tracker::TrackerError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no frame records")]
    Empty,
    #[error("unsupported report schema {0:?}")]
    Version(String),
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("{0}")]
    Sequence(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}
