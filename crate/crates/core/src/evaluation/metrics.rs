use super::{EvalError, Trajectory};
use crate::geometry::{associate, rotation_angle, umeyama, AlignmentError, Pose, SimTransform};

/// Result of an absolute-trajectory-error evaluation.
#[derive(Clone, Debug)]
pub struct AteResult {
    pub rmse: f64,
    /// Similarity mapping estimate positions onto the reference.
    pub alignment: SimTransform,
    pub associated: usize,
    /// Associated pairs divided by reference length.
    pub coverage: f64,
    /// Per-pair translational residuals after alignment.
    pub residuals: Vec<f64>,
}

/// ATE: timestamp association, Umeyama alignment (similarity when `monocular`,
/// rigid otherwise), RMSE of the translational residuals.
pub fn compute_ate(
    est: &Trajectory,
    reference: &Trajectory,
    monocular: bool,
    tolerance: f64,
) -> Result<AteResult, EvalError> {
    let pairs = associate(est, reference, tolerance);
    if pairs.len() < 3 {
        return Err(EvalError::TooFewAssociations(pairs.len()));
    }
    let src: Vec<_> = pairs.iter().map(|&(i, _)| est.entries()[i].pose.center()).collect();
    let dst: Vec<_> = pairs
        .iter()
        .map(|&(_, j)| reference.entries()[j].pose.center())
        .collect();
    let alignment = umeyama(&src, &dst, monocular).map_err(|e| match e {
        AlignmentError::TooFewAssociations(n) => EvalError::TooFewAssociations(n),
        AlignmentError::CollinearDegenerate => EvalError::Degenerate,
    })?;
    let residuals: Vec<f64> = src
        .iter()
        .zip(&dst)
        .map(|(s, d)| (alignment.apply(s) - d).norm())
        .collect();
    let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / residuals.len() as f64).sqrt();
    Ok(AteResult {
        rmse,
        alignment,
        associated: pairs.len(),
        coverage: coverage(pairs.len(), reference.len()),
        residuals,
    })
}

pub fn coverage(associated: usize, reference_len: usize) -> f64 {
    if reference_len == 0 {
        0.0
    } else {
        (associated as f64 / reference_len as f64).min(1.0)
    }
}

/// Maps every camera of `est` through the world similarity `a`, keeping camera
/// orientations rigid. Used to bring a monocular estimate to the reference scale.
pub fn align_trajectory(est: &Trajectory, a: &SimTransform) -> Trajectory {
    est.map_poses(|p| Pose::from_camera_to_world(a.rotation() * p.rotation().transpose(), a.apply(&p.center())))
}

/// Path lengths of the KITTI odometry benchmark (metres).
pub const KITTI_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];

#[derive(Clone, Debug, PartialEq)]
pub struct RpeResult {
    /// Mean translational drift in percent.
    pub trans_percent: f64,
    /// Mean rotational drift in degrees per unit length.
    pub rot_deg_per_unit: f64,
    pub samples: usize,
}

/// Index of the first frame at or beyond `length` of travelled reference distance from
/// `start`, if any.
fn segment_end(dist: &[f64], start: usize, length: f64) -> Option<usize> {
    let target = dist[start] + length;
    let j = dist.partition_point(|&d| d < target);
    (j < dist.len()).then_some(j)
}

/// KITTI-style relative pose error over a set of path lengths.
///
/// Poses are compared in the camera-to-world convention; for each start frame and each
/// length the segment ends at the first frame whose cumulative reference distance
/// reaches the length. The error transform is `ref_rel^-1 * est_rel`.
pub fn compute_rpe(
    est: &Trajectory,
    reference: &Trajectory,
    lengths: &[f64],
    tolerance: f64,
) -> Result<RpeResult, EvalError> {
    let pairs = associate(est, reference, tolerance);
    let est_wc: Vec<Pose> = pairs.iter().map(|&(i, _)| est.entries()[i].pose.inverse()).collect();
    let ref_wc: Vec<Pose> = pairs
        .iter()
        .map(|&(_, j)| reference.entries()[j].pose.inverse())
        .collect();
    let mut dist = Vec::with_capacity(ref_wc.len());
    let mut acc = 0.0;
    for (k, p) in ref_wc.iter().enumerate() {
        if k > 0 {
            acc += (p.translation() - ref_wc[k - 1].translation()).norm();
        }
        dist.push(acc);
    }

    let mut t_sum = 0.0;
    let mut r_sum = 0.0;
    let mut samples = 0usize;
    for start in 0..ref_wc.len() {
        for &len in lengths {
            if !(len > 0.0) {
                continue;
            }
            let Some(end) = segment_end(&dist, start, len) else {
                continue;
            };
            let ref_rel = ref_wc[start].inverse().compose(&ref_wc[end]);
            let est_rel = est_wc[start].inverse().compose(&est_wc[end]);
            let err = ref_rel.inverse().compose(&est_rel);
            t_sum += err.translation().norm() / len;
            r_sum += rotation_angle(err.rotation()).to_degrees() / len;
            samples += 1;
        }
    }
    if samples == 0 {
        return Err(EvalError::TrajectoryTooShort);
    }
    Ok(RpeResult {
        trans_percent: 100.0 * t_sum / samples as f64,
        rot_deg_per_unit: r_sum / samples as f64,
        samples,
    })
}
