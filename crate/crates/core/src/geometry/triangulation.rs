use nalgebra::{Matrix4, Vector2, Vector3};

use super::{CameraIntrinsics, Landmark, Pose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriangulationConfig {
    /// Smallest accepted angle between the two viewing rays, in degrees.
    pub min_parallax_deg: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            min_parallax_deg: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
pub enum TriangulationError {
    #[error("camera centers coincide (baseline {0:e})")]
    DegenerateBaseline(f64),
    #[error("parallax {0:.4} deg below minimum")]
    LowParallax(f64),
    #[error("linear system has no finite solution")]
    PointAtInfinity,
}

/// Parallax angle in degrees between the rays through `obs1` and `obs2`.
pub fn parallax_deg(
    obs1: &Vector2<f64>,
    obs2: &Vector2<f64>,
    pose1: &Pose,
    pose2: &Pose,
    k: &CameraIntrinsics,
) -> f64 {
    let r1 = pose1.rotation().transpose() * k.bearing(obs1);
    let r2 = pose2.rotation().transpose() * k.bearing(obs2);
    let c = (r1.dot(&r2) / (r1.norm() * r2.norm())).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

/// Linear (DLT) two-view triangulation without any acceptance checks.
pub fn triangulate_dlt(
    n1: &Vector2<f64>,
    n2: &Vector2<f64>,
    pose1: &Pose,
    pose2: &Pose,
) -> Option<Vector3<f64>> {
    let p1 = pose1.to_matrix();
    let p2 = pose2.to_matrix();
    let mut a = Matrix4::zeros();
    a.set_row(0, &(n1.x * p1.row(2) - p1.row(0)));
    a.set_row(1, &(n1.y * p1.row(2) - p1.row(1)));
    a.set_row(2, &(n2.x * p2.row(2) - p2.row(0)));
    a.set_row(3, &(n2.y * p2.row(2) - p2.row(1)));
    // rows scaled to unit norm for conditioning
    for mut r in a.row_iter_mut() {
        let n = r.norm();
        if n > 0.0 {
            r /= n;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = v_t.row(min_idx);
    if h[3].abs() < 1e-300 {
        return None;
    }
    let x = Vector3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Triangulates one landmark from pixel observations in two posed views.
pub fn triangulate(
    obs1: &Vector2<f64>,
    obs2: &Vector2<f64>,
    pose1: &Pose,
    pose2: &Pose,
    k: &CameraIntrinsics,
    cfg: &TriangulationConfig,
) -> Result<Landmark, TriangulationError> {
    let baseline = (pose1.center() - pose2.center()).norm();
    if baseline < 1e-12 {
        return Err(TriangulationError::DegenerateBaseline(baseline));
    }
    let parallax = parallax_deg(obs1, obs2, pose1, pose2, k);
    if parallax < cfg.min_parallax_deg {
        return Err(TriangulationError::LowParallax(parallax));
    }
    let x = triangulate_dlt(&k.normalize(obs1), &k.normalize(obs2), pose1, pose2)
        .ok_or(TriangulationError::PointAtInfinity)?;
    Landmark::new(x).map_err(|_| TriangulationError::PointAtInfinity)
}
