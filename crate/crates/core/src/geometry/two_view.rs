use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::triangulation::triangulate_dlt;
use super::{CameraIntrinsics, Pose};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Sampson distance threshold in normalized image coordinates.
    pub threshold: f64,
    pub min_inlier_ratio: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            threshold: 1e-3,
            min_inlier_ratio: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, thiserror::Error)]
pub enum TwoViewError {
    #[error("need at least 8 matches, got {0}")]
    InsufficientMatches(usize),
    #[error("inlier ratio {0:.3} below minimum")]
    NoConsensus(f64),
    #[error("cheirality test is ambiguous ({best} vs {second} points in front)")]
    DegenerateConfiguration { best: usize, second: usize },
}

#[derive(Clone, Debug)]
pub struct TwoViewEstimate {
    /// Transform from the first camera frame to the second (T_21), unit-norm translation.
    pub relative: Pose,
    pub essential: Matrix3<f64>,
    pub inliers: Vec<bool>,
}

impl TwoViewEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Hartley normalization: centroid to origin, mean distance sqrt(2).
fn normalizing_transform(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_dist > 1e-300 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Normalized eight-point essential matrix from normalized-coordinate correspondences.
pub fn eight_point(x1: &[Vector2<f64>], x2: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    debug_assert_eq!(x1.len(), x2.len());
    let n = x1.len();
    if n < 8 {
        return None;
    }
    let t1 = normalizing_transform(x1);
    let t2 = normalizing_transform(x2);
    // pad to at least 9 rows so the SVD exposes the full right null space
    let mut a = DMatrix::<f64>::zeros(n.max(9), 9);
    for i in 0..n {
        let p = t1 * Vector3::new(x1[i].x, x1[i].y, 1.0);
        let q = t2 * Vector3::new(x2[i].x, x2[i].y, 1.0);
        let row = [
            q.x * p.x,
            q.x * p.y,
            q.x,
            q.y * p.x,
            q.y * p.y,
            q.y,
            p.x,
            p.y,
            1.0,
        ];
        for (j, v) in row.iter().enumerate() {
            a[(i, j)] = *v;
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (min_idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let e = v_t.row(min_idx);
    let en = Matrix3::new(e[0], e[1], e[2], e[3], e[4], e[5], e[6], e[7], e[8]);
    let e_full = t2.transpose() * en * t1;
    // project onto the essential manifold: singular values (s, s, 0)
    let svd = e_full.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let s = (svd.singular_values[0] + svd.singular_values[1]) / 2.0;
    let e = u * Matrix3::from_diagonal(&Vector3::new(s, s, 0.0)) * v_t;
    let norm = e.norm();
    (norm > 0.0 && norm.is_finite()).then(|| e / norm)
}

/// First-order geometric (Sampson) distance of a correspondence to the epipolar constraint.
pub fn sampson_distance(e: &Matrix3<f64>, x1: &Vector2<f64>, x2: &Vector2<f64>) -> f64 {
    let p = Vector3::new(x1.x, x1.y, 1.0);
    let q = Vector3::new(x2.x, x2.y, 1.0);
    let ep = e * p;
    let etq = e.transpose() * q;
    let num = q.dot(&ep);
    let den = ep.x * ep.x + ep.y * ep.y + etq.x * etq.x + etq.y * etq.y;
    if den <= 0.0 {
        return f64::INFINITY;
    }
    num.abs() / den.sqrt()
}

/// The four (R, t) candidates encoded by an essential matrix.
pub fn decompose_essential(e: &Matrix3<f64>) -> [Pose; 4] {
    let svd = e.svd(true, true);
    let mut u = svd.u.unwrap();
    let mut v_t = svd.v_t.unwrap();
    if u.determinant() < 0.0 {
        u.column_mut(2).neg_mut();
    }
    if v_t.determinant() < 0.0 {
        v_t.row_mut(2).neg_mut();
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v_t;
    let r2 = u * w.transpose() * v_t;
    let t: Vector3<f64> = u.column(2).into_owned().normalize();
    [
        Pose::from_parts(r1, t),
        Pose::from_parts(r1, -t),
        Pose::from_parts(r2, t),
        Pose::from_parts(r2, -t),
    ]
}

fn count_inliers(e: &Matrix3<f64>, x1: &[Vector2<f64>], x2: &[Vector2<f64>], thr: f64) -> Vec<bool> {
    x1.iter()
        .zip(x2)
        .map(|(a, b)| sampson_distance(e, a, b) < thr)
        .collect()
}

fn fit_subset(x1: &[Vector2<f64>], x2: &[Vector2<f64>], mask: &[bool]) -> Option<Matrix3<f64>> {
    let (a, b): (Vec<_>, Vec<_>) = x1
        .iter()
        .zip(x2)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((a, b), _)| (*a, *b))
        .unzip();
    eight_point(&a, &b)
}

/// Relative pose from pixel correspondences via RANSAC over the normalized eight-point
/// essential matrix, followed by cheirality disambiguation.
pub fn estimate_two_view(
    matches: &[(Vector2<f64>, Vector2<f64>)],
    k: &CameraIntrinsics,
    ransac: &RansacConfig,
) -> Result<TwoViewEstimate, TwoViewError> {
    let n = matches.len();
    if n < 8 {
        return Err(TwoViewError::InsufficientMatches(n));
    }
    let x1: Vec<_> = matches.iter().map(|m| k.normalize(&m.0)).collect();
    let x2: Vec<_> = matches.iter().map(|m| k.normalize(&m.1)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(ransac.seed);
    let mut best: Option<(usize, Vec<bool>)> = None;
    let mut s1 = [Vector2::zeros(); 8];
    let mut s2 = [Vector2::zeros(); 8];
    for _ in 0..ransac.iterations.max(1) {
        for (slot, idx) in sample(&mut rng, n, 8).into_iter().enumerate() {
            s1[slot] = x1[idx];
            s2[slot] = x2[idx];
        }
        let Some(e) = eight_point(&s1, &s2) else {
            continue;
        };
        let mask = count_inliers(&e, &x1, &x2, ransac.threshold);
        let c = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(bc, _)| c > *bc) {
            best = Some((c, mask));
        }
    }
    let (mut count, mut mask) = best.ok_or(TwoViewError::NoConsensus(0.0))?;
    // refine on the consensus set until the set stops growing
    let mut essential = fit_subset(&x1, &x2, &mask).ok_or(TwoViewError::NoConsensus(0.0))?;
    for _ in 0..5 {
        let new_mask = count_inliers(&essential, &x1, &x2, ransac.threshold);
        let c = new_mask.iter().filter(|&&b| b).count();
        if c < 8 || new_mask == mask {
            break;
        }
        let Some(e) = fit_subset(&x1, &x2, &new_mask) else {
            break;
        };
        essential = e;
        mask = new_mask;
        count = c;
    }
    mask = count_inliers(&essential, &x1, &x2, ransac.threshold);
    count = count.min(mask.iter().filter(|&&b| b).count());
    let ratio = count as f64 / n as f64;
    if ratio < ransac.min_inlier_ratio || count < 8 {
        return Err(TwoViewError::NoConsensus(ratio));
    }

    let identity = Pose::identity();
    let mut scored: Vec<(usize, Pose)> = decompose_essential(&essential)
        .into_iter()
        .map(|cand| {
            let front = mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .filter(|(i, _)| {
                    triangulate_dlt(&x1[*i], &x2[*i], &identity, &cand)
                        .is_some_and(|p| p.z > 0.0 && cand.transform(&p).z > 0.0)
                })
                .count();
            (front, cand)
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0));
    let (best, second) = (scored[0].0, scored[1].0);
    if best == second || 2 * best <= count {
        return Err(TwoViewError::DegenerateConfiguration { best, second });
    }
    Ok(TwoViewEstimate {
        relative: scored[0].1,
        essential,
        inliers: mask,
    })
}
