//! Trajectory files, absolute and relative trajectory error, multi-run aggregation.

mod metrics;
mod report;
mod trajectory;

pub use metrics::{align_trajectory, compute_ate, compute_rpe, coverage, AteResult, RpeResult, KITTI_LENGTHS};
pub use report::{aggregate, trajectory_svg, MetricReport, RunMetrics};
pub use trajectory::{Trajectory, TrajectoryEntry, TrajectoryFormat};


#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("need at least 3 associated pose pairs, got {0}")]
    TooFewAssociations(usize),
    #[error("associated positions are degenerate (collinear) for alignment")]
    Degenerate,
    #[error("trajectory too short: no segment for any requested length")]
    TrajectoryTooShort,
    #[error("cannot aggregate an empty report list")]
    EmptyReportList,
    #[error("timestamps must strictly increase (at {0})")]
    NonIncreasingTimestamps(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}: {1}")]
    Io(String, String),
}
