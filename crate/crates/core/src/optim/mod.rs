//! Nonlinear least squares: reprojection bundle adjustment with a Schur-complement
//! Levenberg-Marquardt solver, and a Sim(3) pose graph.

mod ba;
mod pose_graph;

pub use ba::{huber_cost, huber_weight, optimize_pose, reprojection_jacobians, BaObservation, BaProblem, LmConfig, LmReport};
pub use pose_graph::{PoseGraph, PoseGraphReport, SimEdge};

/// 95% quantile of the chi-square distribution with 2 degrees of freedom.
pub const CHI2_2DOF: f64 = 5.991;
/// 95% quantile of the chi-square distribution with 1 degree of freedom.
pub const CHI2_1DOF: f64 = 3.84;
/// 99% quantile of the chi-square distribution with 2 degrees of freedom.
pub const CHI2_2DOF_99: f64 = 9.21;
