use nalgebra::{Matrix3, Vector3};

use super::SimTransform;
use crate::evaluation::Trajectory;

/// Default timestamp association tolerance in seconds.
pub const DEFAULT_ASSOCIATION_TOLERANCE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
pub enum AlignmentError {
    #[error("need at least 3 associated positions, got {0}")]
    TooFewAssociations(usize),
    #[error("associated positions are collinear")]
    CollinearDegenerate,
}

/// Pairs `(estimate index, reference index)` whose timestamps differ by at most `tolerance`.
///
/// Each reference entry is used at most once; on conflicts the closer estimate wins.
pub fn associate(estimate: &Trajectory, reference: &Trajectory, tolerance: f64) -> Vec<(usize, usize)> {
    let ref_ts: Vec<f64> = reference.entries().iter().map(|e| e.timestamp).collect();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; ref_ts.len()];
    for (i, e) in estimate.entries().iter().enumerate() {
        let pos = ref_ts.partition_point(|&t| t < e.timestamp);
        let mut nearest: Option<(usize, f64)> = None;
        for j in [pos.wrapping_sub(1), pos] {
            if let Some(&t) = ref_ts.get(j) {
                let d = (t - e.timestamp).abs();
                if d <= tolerance && nearest.is_none_or(|(_, nd)| d < nd) {
                    nearest = Some((j, d));
                }
            }
        }
        if let Some((j, d)) = nearest {
            if best[j].is_none_or(|(_, bd)| d < bd) {
                best[j] = Some((i, d));
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = best
        .iter()
        .enumerate()
        .filter_map(|(j, b)| b.map(|(i, _)| (i, j)))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Closed-form least-squares similarity (or rigid motion when `with_scale` is false)
/// minimizing `sum |s R src_i + t - dst_i|^2`.
pub fn umeyama(
    src: &[Vector3<f64>],
    dst: &[Vector3<f64>],
    with_scale: bool,
) -> Result<SimTransform, AlignmentError> {
    let n = src.len().min(dst.len());
    if n < 3 {
        return Err(AlignmentError::TooFewAssociations(n));
    }
    let nf = n as f64;
    let mu_s = src[..n].iter().sum::<Vector3<f64>>() / nf;
    let mu_d = dst[..n].iter().sum::<Vector3<f64>>() / nf;

    let mut cov = Matrix3::zeros();
    let mut src_cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src[..n].iter().zip(&dst[..n]) {
        let sc = s - mu_s;
        let dc = d - mu_d;
        cov += dc * sc.transpose();
        src_cov += sc * sc.transpose();
        var_s += sc.norm_squared();
    }
    cov /= nf;
    var_s /= nf;

    let src_sv = src_cov.symmetric_eigenvalues();
    let mut sorted = [src_sv[0].abs(), src_sv[1].abs(), src_sv[2].abs()];
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted[0] <= 0.0 || sorted[1] <= 1e-12 * sorted[0] {
        return Err(AlignmentError::CollinearDegenerate);
    }

    let svd = cov.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut d = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[2] = -1.0;
    }
    let r = u * Matrix3::from_diagonal(&d) * v_t;
    let s = if with_scale {
        svd.singular_values.dot(&d) / var_s
    } else {
        1.0
    };
    let t = mu_d - s * (r * mu_s);
    Ok(SimTransform::from_parts(s, r, t))
}

/// Aligns the camera centers of `estimate` onto those of `reference` after timestamp
/// association.
pub fn umeyama_align(
    estimate: &Trajectory,
    reference: &Trajectory,
    with_scale: bool,
    tolerance: f64,
) -> Result<SimTransform, AlignmentError> {
    let pairs = associate(estimate, reference, tolerance);
    let (src, dst): (Vec<_>, Vec<_>) = pairs
        .iter()
        .map(|&(i, j)| {
            (
                estimate.entries()[i].pose.center(),
                reference.entries()[j].pose.center(),
            )
        })
        .unzip();
    umeyama(&src, &dst, with_scale)
}
