use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{guided_pairs, KeyFrameDatabase, Vocabulary};
use crate::features::{BestTwo, MatchThresholds};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::mapping::{Frame, KeyFrameId, Map, MapPointId};
use crate::optim::{optimize_pose, CHI2_2DOF};
use crate::tracking::{search_by_projection, ProjectionSearch};

const CANDIDATES: usize = 5;
const MIN_MATCHES: usize = 15;
const MIN_RANSAC_INLIERS: usize = 10;
const MIN_INLIERS: usize = 15;
const RANSAC_ITERATIONS: usize = 200;

/// Camera pose from at least six 3D points and their normalized image coordinates, by
/// direct linear transform of the 3x4 projection matrix.
pub fn solve_pnp_dlt(points: &[Vector3<f64>], normalized: &[Vector2<f64>]) -> Option<Pose> {
    let n = points.len().min(normalized.len());
    if n < 6 {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (r, (x, u)) in points.iter().zip(normalized).enumerate() {
        let xh = [x.x, x.y, x.z, 1.0];
        for c in 0..4 {
            a[(2 * r, c)] = xh[c];
            a[(2 * r, 8 + c)] = -u.x * xh[c];
            a[(2 * r + 1, 4 + c)] = xh[c];
            a[(2 * r + 1, 8 + c)] = -u.y * xh[c];
        }
    }
    let ata = a.transpose() * &a;
    let eig = ata.symmetric_eigen();
    let (min_idx, _) = eig.eigenvalues.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let v = eig.eigenvectors.column(min_idx);
    let mut m = Matrix3::from_fn(|r, c| v[4 * r + c]);
    let mut t = Vector3::new(v[3], v[7], v[11]);
    if m.determinant() < 0.0 {
        m = -m;
        t = -t;
    }
    let svd = m.svd(true, true);
    let scale = svd.singular_values.mean();
    if scale <= 1e-12 {
        return None;
    }
    let r = svd.u? * svd.v_t?;
    let pose = Pose::new(r, t / scale).ok()?;
    let in_front = points.iter().filter(|x| pose.transform(x).z > 0.0).count();
    (2 * in_front > n).then_some(pose)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Relocalization {
    pub keyframe: KeyFrameId,
    pub pose: Pose,
    /// Frame keypoint index and the map point it was matched to; inliers only.
    pub matches: Vec<(usize, MapPointId)>,
}

fn inlier_count(pose: &Pose, corr: &[(Vector3<f64>, Vector2<f64>, f64)], k: &CameraIntrinsics) -> Vec<usize> {
    (0..corr.len())
        .filter(|&c| {
            let (x, px, w) = &corr[c];
            let pc = pose.transform(x);
            pc.z > 0.0 && (k.project_unchecked(&pc) - px).norm_squared() * w < CHI2_2DOF
        })
        .collect()
}

/// Recovers the pose of a frame after tracking failure by querying the keyframe
/// database, matching against the best candidates' map points and solving PnP.
pub fn relocalize(
    map: &Map,
    db: &KeyFrameDatabase,
    vocab: &Vocabulary,
    frame: &Frame,
    k: &CameraIntrinsics,
    th: &MatchThresholds,
    seed: u64,
) -> Option<Relocalization> {
    let (bow, fv) = vocab.transform(&frame.descriptors).ok()?;
    let candidates: Vec<KeyFrameId> = db
        .query(&bow, &BTreeSet::new(), 0.0)
        .into_iter()
        .map(|(c, _)| c)
        .filter(|c| map.keyframe(*c).is_some())
        .take(CANDIDATES)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv_sigma2 = |i: usize| 1.0 / (frame.keypoints[i].scale * frame.keypoints[i].scale);
    for c in candidates {
        let kc = map.keyframe(c).unwrap();
        let pairs = guided_pairs(
            &fv,
            frame.keypoints.len(),
            &kc.features,
            kc.keypoints.len(),
            |_| true,
            |j| kc.points[j].is_some_and(|p| map.point(p).is_some()),
        );
        let mut by_point: BTreeMap<MapPointId, (f64, usize)> = BTreeMap::new();
        for (i, js) in pairs {
            let mut best = BestTwo::empty();
            for j in js {
                best.offer(j, frame.descriptors[i].distance(&map.point(kc.points[j].unwrap()).unwrap().descriptor));
            }
            if best.passes(th.th_low, th.ratio) {
                let p = kc.points[best.index].unwrap();
                if by_point.get(&p).is_none_or(|(d, _)| best.best < *d) {
                    by_point.insert(p, (best.best, i));
                }
            }
        }
        if by_point.len() < MIN_MATCHES {
            continue;
        }
        let matches: Vec<(usize, MapPointId)> = by_point.iter().map(|(p, (_, i))| (*i, *p)).collect();
        let corr: Vec<(Vector3<f64>, Vector2<f64>, f64)> = matches
            .iter()
            .map(|(i, p)| (map.point(*p).unwrap().position.position, frame.keypoints[*i].position(), inv_sigma2(*i)))
            .collect();
        let mut best: Option<(Pose, Vec<usize>)> = None;
        for _ in 0..RANSAC_ITERATIONS {
            let pick = sample(&mut rng, corr.len(), 6).into_vec();
            let pts: Vec<Vector3<f64>> = pick.iter().map(|&c| corr[c].0).collect();
            let nrm: Vec<Vector2<f64>> = pick.iter().map(|&c| k.normalize(&corr[c].1)).collect();
            let Some(pose) = solve_pnp_dlt(&pts, &nrm) else { continue };
            let inl = inlier_count(&pose, &corr, k);
            if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
                best = Some((pose, inl));
            }
        }
        let Some((pose, inliers)) = best else { continue };
        if inliers.len() < MIN_RANSAC_INLIERS {
            continue;
        }
        let sub: Vec<_> = inliers.iter().map(|&c| corr[c]).collect();
        let (pose, _) = optimize_pose(pose, &sub, k, 4, 10, CHI2_2DOF);

        // widen the match set with the candidate's neighbourhood
        let mut assoc: BTreeMap<usize, MapPointId> = inlier_count(&pose, &corr, k).iter().map(|&c| matches[c]).collect();
        let taken: Vec<Option<MapPointId>> = (0..frame.keypoints.len()).map(|i| assoc.get(&i).copied()).collect();
        let used: BTreeSet<MapPointId> = assoc.values().copied().collect();
        let local: Vec<MapPointId> = map
            .points_of(&map.connected_group(c))
            .into_iter()
            .filter(|p| !used.contains(p))
            .collect();
        let params = ProjectionSearch {
            radius: 10.0,
            limit: th.th_high,
            ratio: th.ratio,
        };
        for (i, p, _) in search_by_projection(
            map,
            &frame.keypoints,
            &frame.descriptors,
            &frame.grid,
            &taken,
            |x| pose.transform(x),
            pose.center(),
            &local,
            k,
            &params,
        ) {
            assoc.insert(i, p);
        }
        let list: Vec<(usize, MapPointId)> = assoc.into_iter().collect();
        let corr: Vec<_> = list
            .iter()
            .map(|(i, p)| (map.point(*p).unwrap().position.position, frame.keypoints[*i].position(), inv_sigma2(*i)))
            .collect();
        let (pose, mask) = optimize_pose(pose, &corr, k, 4, 10, CHI2_2DOF);
        let kept: Vec<(usize, MapPointId)> = list.iter().zip(&mask).filter(|(_, m)| **m).map(|(x, _)| *x).collect();
        if kept.len() >= MIN_INLIERS {
            return Some(Relocalization {
                keyframe: c,
                pose,
                matches: kept,
            });
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;

    #[test]
    fn dlt_recovers_pose_from_exact_points() {
        let pose = Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.3, -0.1, 0.5));
        let pts: Vec<Vector3<f64>> = (0..10)
            .map(|i| {
                let f = i as f64;
                Vector3::new((f * 0.7).sin() * 2.0, (f * 1.3).cos(), 4.0 + (f * 0.4).sin())
            })
            .collect();
        let nrm: Vec<Vector2<f64>> = pts
            .iter()
            .map(|x| {
                let c = pose.transform(x);
                Vector2::new(c.x / c.z, c.y / c.z)
            })
            .collect();
        let est = solve_pnp_dlt(&pts, &nrm).unwrap();
        assert!(est.max_difference(&pose) < 1e-8);
    }
}
