//! Per-frame tracking: map initialization from two views, constant-velocity prediction,
//! projection search against the local map, motion-only refinement and the keyframe
//! decision.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{match_descriptors, BestTwo, Descriptor, Keypoint, MatchMode, MatchThresholds};
use crate::geometry::{
    estimate_two_view, triangulate, CameraIntrinsics, Pose, Projection, RansacConfig, TriangulationConfig, TwoViewError,
};
use crate::mapping::{insert_keyframe, FeatureGrid, Frame, KeyFrameId, Map, MapPointId};
use crate::optim::{optimize_pose, BaObservation, BaProblem, LmConfig, CHI2_2DOF};
use crate::place_recognition::{KeyFrameDatabase, Vocabulary};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrackingStatus {
    #[default]
    NotInitialized,
    Tracking,
    Lost,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrackingState {
    pub status: TrackingStatus,
    pub reference_keyframe: Option<KeyFrameId>,
    pub inlier_count: usize,
    pub frames_since_keyframe: usize,
}

/// Motion between the two most recent frames, `T_{t-1} * T_{t-2}^-1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityModel {
    pub last_relative: Pose,
}

impl Default for VelocityModel {
    fn default() -> Self {
        Self {
            last_relative: Pose::identity(),
        }
    }
}

impl VelocityModel {
    pub fn update(&mut self, previous: &Pose, current: &Pose) {
        self.last_relative = current.compose(&previous.inverse());
    }
}

/// Constant-velocity prediction `last_relative * prev`.
pub fn predict_pose(prev: &Pose, vel: &VelocityModel) -> Pose {
    vel.last_relative.compose(prev)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    /// Projection search window in pixels.
    pub search_radius: f64,
    /// Window used for the second search after the first pose refinement.
    pub refine_radius: f64,
    /// Matches below which the window is widened (twice, doubling each time).
    pub widen_below: usize,
    pub min_inliers: usize,
    pub rounds: usize,
    pub iterations: usize,
    pub chi2: f64,
    pub keyframe_gap: usize,
    pub keyframe_ratio: f64,
    pub init_min_points: usize,
    pub init_min_parallax_deg: f64,
    pub init_ransac_iterations: usize,
    /// Sampson threshold for initialization in pixels; converted with the focal length.
    pub init_threshold_px: f64,
    pub init_ba_iterations: usize,
    /// Upper bound on the number of keyframes forming the local map.
    pub local_keyframes: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self {
            search_radius: 15.0,
            refine_radius: 4.0,
            widen_below: 20,
            min_inliers: 15,
            rounds: 4,
            iterations: 10,
            chi2: CHI2_2DOF,
            keyframe_gap: 20,
            keyframe_ratio: 0.9,
            init_min_points: 50,
            init_min_parallax_deg: 1.0,
            init_ransac_iterations: 200,
            init_threshold_px: 1.0,
            init_ba_iterations: 20,
            local_keyframes: 80,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum InitError {
    #[error("only {0} matches between the initialization frames")]
    InsufficientMatches(usize),
    #[error("no two-view consensus: {0}")]
    NoConsensus(String),
    #[error("only {0} points triangulated")]
    InsufficientPoints(usize),
}

#[derive(Debug, Error, PartialEq)]
pub enum TrackError {
    #[error("tracking lost with {inliers} inliers")]
    LostTracking { inliers: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct InitReport {
    pub keyframes: (KeyFrameId, KeyFrameId),
    pub points: Vec<MapPointId>,
    /// Pose of the second frame, with the scene scaled to unit median depth.
    pub relative: Pose,
}

/// Builds the initial map from two frames. On success both frames carry their poses and
/// map-point associations and are inserted as the first two keyframes.
#[allow(clippy::too_many_arguments)]
pub fn initialize_map(
    map: &mut Map,
    f1: &mut Frame,
    f2: &mut Frame,
    k: &CameraIntrinsics,
    th: &MatchThresholds,
    cfg: &TrackingConfig,
    vocab: Option<&Vocabulary>,
    mut db: Option<&mut KeyFrameDatabase>,
    seed: u64,
) -> Result<InitReport, InitError> {
    let matches = match_descriptors(&f1.descriptors, &f2.descriptors, th, MatchMode::Relaxed)
        .map_err(|e| InitError::NoConsensus(e.to_string()))?;
    if matches.len() < 8 {
        return Err(InitError::InsufficientMatches(matches.len()));
    }
    let pixels: Vec<(Vector2<f64>, Vector2<f64>)> = matches
        .iter()
        .map(|m| (f1.keypoints[m.index_a].position(), f2.keypoints[m.index_b].position()))
        .collect();
    let ransac = RansacConfig {
        iterations: cfg.init_ransac_iterations,
        threshold: (cfg.init_threshold_px / k.fx.min(k.fy)).max(1e-3),
        seed,
        ..Default::default()
    };
    let est = estimate_two_view(&pixels, k, &ransac).map_err(|e| match e {
        TwoViewError::InsufficientMatches(n) => InitError::InsufficientMatches(n),
        other => InitError::NoConsensus(other.to_string()),
    })?;
    let p1 = Pose::identity();
    let p2 = est.relative;
    let tri = TriangulationConfig {
        min_parallax_deg: cfg.init_min_parallax_deg,
    };
    let mut tracks: Vec<(usize, usize, Vector3<f64>)> = Vec::new();
    for (m, (pair, inl)) in matches.iter().zip(pixels.iter().zip(&est.inliers)) {
        if !inl {
            continue;
        }
        let Ok(lm) = triangulate(&pair.0, &pair.1, &p1, &p2, k, &tri) else { continue };
        let x = lm.position;
        let s1 = f1.keypoints[m.index_a].scale;
        let s2 = f2.keypoints[m.index_b].scale;
        let ok = [(&p1, pair.0, s1), (&p2, pair.1, s2)].iter().all(|(pose, obs, s)| {
            let pc = pose.transform(&x);
            pc.z > 0.0 && (k.project_unchecked(&pc) - obs).norm_squared() < cfg.chi2 * s * s
        });
        if ok {
            tracks.push((m.index_a, m.index_b, x));
        }
    }
    if tracks.len() < cfg.init_min_points {
        return Err(InitError::InsufficientPoints(tracks.len()));
    }

    // two-view bundle adjustment with the first camera fixed
    let mut problem = BaProblem::default();
    problem.add_pose(p1, true);
    problem.add_pose(p2, false);
    for (slot, (i1, i2, x)) in tracks.iter().enumerate() {
        problem.add_point(*x, false);
        for (pose, kp) in [(0, &f1.keypoints[*i1]), (1, &f2.keypoints[*i2])] {
            problem.add_observation(BaObservation {
                pose,
                point: slot,
                pixel: kp.position(),
                inv_sigma2: 1.0 / (kp.scale * kp.scale),
            });
        }
    }
    problem.optimize(
        k,
        &LmConfig {
            max_iterations: cfg.init_ba_iterations,
            ..Default::default()
        },
    );
    problem.classify_outliers(k, cfg.chi2);
    let mut depths: Vec<f64> = problem.points.iter().map(|x| x.z).filter(|z| *z > 0.0).collect();
    if depths.is_empty() {
        return Err(InitError::InsufficientPoints(0));
    }
    depths.sort_by(|a, b| a.total_cmp(b));
    let scale = 1.0 / depths[(depths.len() - 1) / 2];
    let pose2 = problem.poses[1].scaled(scale);

    f1.pose = p1;
    f2.pose = pose2;
    f1.map_points.iter_mut().for_each(|m| *m = None);
    f2.map_points.iter_mut().for_each(|m| *m = None);
    let kf1 = insert_keyframe(map, f1, vocab, db.as_deref_mut());
    let kf2 = insert_keyframe(map, f2, vocab, db.as_deref_mut());
    let mut points = Vec::new();
    for (slot, (i1, i2, _)) in tracks.iter().enumerate() {
        let active = problem.active[2 * slot] && problem.active[2 * slot + 1];
        if !active {
            continue;
        }
        let Some(pid) = map.add_point(problem.points[slot] * scale, kf1, *i1) else { continue };
        map.add_observation(pid, kf2, *i2);
        map.update_point_descriptor(pid);
        map.update_point_normal(pid);
        f1.map_points[*i1] = Some(pid);
        f2.map_points[*i2] = Some(pid);
        points.push(pid);
    }
    if points.len() < cfg.init_min_points {
        return Err(InitError::InsufficientPoints(points.len()));
    }
    map.update_connections(kf1);
    map.update_connections(kf2);
    Ok(InitReport {
        keyframes: (kf1, kf2),
        points,
        relative: pose2,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionSearch {
    pub radius: f64,
    pub limit: f64,
    pub ratio: f64,
}

/// Projects `candidates` with `to_camera`, and matches each to the best free keypoint
/// within `radius` pixels. Every keypoint receives at most one point, the closest in
/// descriptor space. Returns `(keypoint, point, distance)` sorted by keypoint.
#[allow(clippy::too_many_arguments)]
pub fn search_by_projection(
    map: &Map,
    keypoints: &[Keypoint],
    descriptors: &[Descriptor],
    grid: &FeatureGrid,
    taken: &[Option<MapPointId>],
    to_camera: impl Fn(&Vector3<f64>) -> Vector3<f64>,
    center: Vector3<f64>,
    candidates: &[MapPointId],
    k: &CameraIntrinsics,
    params: &ProjectionSearch,
) -> Vec<(usize, MapPointId, f64)> {
    let mut best_for: BTreeMap<usize, (f64, MapPointId)> = BTreeMap::new();
    for &pid in candidates {
        let Some(p) = map.point(pid) else { continue };
        let x = p.position.position;
        let Projection::Visible(px) = k.project_camera(&to_camera(&x)) else { continue };
        if !view_ok(&x, &center, &p.normal) {
            continue;
        }
        let mut best = BestTwo::empty();
        for j in grid.within(keypoints, px.x, px.y, params.radius) {
            if taken.get(j).is_some_and(|t| t.is_some()) {
                continue;
            }
            best.offer(j, p.descriptor.distance(&descriptors[j]));
        }
        if best.passes(params.limit, params.ratio) && best_for.get(&best.index).is_none_or(|(d, _)| best.best < *d) {
            best_for.insert(best.index, (best.best, pid));
        }
    }
    best_for.into_iter().map(|(j, (d, p))| (j, p, d)).collect()
}

fn view_ok(x: &Vector3<f64>, center: &Vector3<f64>, normal: &Vector3<f64>) -> bool {
    let ray = x - center;
    normal.norm() < 0.5 || ray.norm() <= 0.0 || ray.normalize().dot(normal) >= 0.5
}

/// Keyframes forming the local map: those observing the given points, the reference,
/// and the strongest neighbours of each.
pub fn local_keyframes(map: &Map, reference: KeyFrameId, seen: &[MapPointId], limit: usize) -> BTreeSet<KeyFrameId> {
    let mut votes: BTreeMap<KeyFrameId, usize> = BTreeMap::new();
    for p in seen.iter().filter_map(|p| map.point(*p)) {
        for o in p.observations.keys() {
            *votes.entry(*o).or_default() += 1;
        }
    }
    let mut first: Vec<(KeyFrameId, usize)> = votes.into_iter().collect();
    first.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: BTreeSet<KeyFrameId> = BTreeSet::new();
    if map.keyframe(reference).is_some() {
        out.insert(reference);
    }
    out.extend(first.iter().map(|(k, _)| *k).take(limit));
    let core: Vec<KeyFrameId> = out.iter().copied().collect();
    for kf in core {
        if out.len() >= limit {
            break;
        }
        if let Some(k) = map.keyframe(kf) {
            out.extend(k.best_covisible(10));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackOutcome {
    pub pose: Pose,
    pub inliers: usize,
    /// Inlier associations, also written into the frame.
    pub matches: Vec<(usize, MapPointId)>,
    /// Local points that projected into the image.
    pub visible: Vec<MapPointId>,
}

/// Tracks `frame` against the local map starting from `predicted`.
#[allow(clippy::too_many_arguments)]
pub fn track_frame(
    frame: &mut Frame,
    map: &Map,
    reference: KeyFrameId,
    predicted: Pose,
    seen: &[MapPointId],
    k: &CameraIntrinsics,
    th: &MatchThresholds,
    cfg: &TrackingConfig,
) -> Result<TrackOutcome, TrackError> {
    let local = local_keyframes(map, reference, seen, cfg.local_keyframes);
    let points: Vec<MapPointId> = map.points_of(&local).into_iter().collect();
    let free = vec![None; frame.keypoints.len()];
    let search = |pose: &Pose, radius: f64, taken: &[Option<MapPointId>]| {
        search_by_projection(
            map,
            &frame.keypoints,
            &frame.descriptors,
            &frame.grid,
            taken,
            |x| pose.transform(x),
            pose.center(),
            &points,
            k,
            &ProjectionSearch {
                radius,
                limit: th.th_high,
                ratio: th.ratio,
            },
        )
    };
    let mut radius = cfg.search_radius;
    let mut found = search(&predicted, radius, &free);
    for _ in 0..2 {
        if found.len() >= cfg.widen_below {
            break;
        }
        radius *= 2.0;
        found = search(&predicted, radius, &free);
    }
    let refine = |pose: Pose, found: &[(usize, MapPointId, f64)]| {
        let corr: Vec<(Vector3<f64>, Vector2<f64>, f64)> = found
            .iter()
            .map(|(i, p, _)| {
                let kp = &frame.keypoints[*i];
                (map.point(*p).unwrap().position.position, kp.position(), 1.0 / (kp.scale * kp.scale))
            })
            .collect();
        optimize_pose(pose, &corr, k, cfg.rounds, cfg.iterations, cfg.chi2)
    };
    if found.len() < 3 {
        return Err(TrackError::LostTracking { inliers: found.len() });
    }
    let (pose, mask) = refine(predicted, &found);

    // second pass from the refined pose keeps the first inliers and adds new ones
    let mut taken = vec![None; frame.keypoints.len()];
    let mut kept: Vec<(usize, MapPointId, f64)> = Vec::new();
    for (m, ok) in found.iter().zip(&mask) {
        if *ok {
            taken[m.0] = Some(m.1);
            kept.push(*m);
        }
    }
    let used: BTreeSet<MapPointId> = kept.iter().map(|m| m.1).collect();
    let extra: Vec<_> = search(&pose, cfg.refine_radius, &taken).into_iter().filter(|m| !used.contains(&m.1)).collect();
    kept.extend(extra);
    kept.sort_by_key(|m| m.0);
    let (pose, mask) = refine(pose, &kept);

    let matches: Vec<(usize, MapPointId)> = kept.iter().zip(&mask).filter(|(_, ok)| **ok).map(|(m, _)| (m.0, m.1)).collect();
    if matches.len() < cfg.min_inliers {
        return Err(TrackError::LostTracking { inliers: matches.len() });
    }
    let visible = points
        .iter()
        .copied()
        .filter(|p| {
            let pt = map.point(*p).unwrap();
            matches!(k.project(&pt.position, &pose), Projection::Visible(_))
        })
        .collect();
    frame.pose = pose;
    frame.map_points.iter_mut().for_each(|m| *m = None);
    for (i, p) in &matches {
        frame.map_points[*i] = Some(*p);
    }
    Ok(TrackOutcome {
        pose,
        inliers: matches.len(),
        matches,
        visible,
    })
}

/// Keyframe decision: a frame-gap or tracked-ratio trigger, enough inliers, and an idle
/// mapper.
pub fn need_keyframe(state: &TrackingState, frame: &Frame, map: &Map, mapping_idle: bool, cfg: &TrackingConfig) -> bool {
    let tracked = frame.tracked_count().min(state.inlier_count.max(frame.tracked_count()));
    let reference_points = state
        .reference_keyframe
        .and_then(|r| map.keyframe(r))
        .map_or(0, |r| r.point_count());
    let trigger = state.frames_since_keyframe >= cfg.keyframe_gap || (tracked as f64) < cfg.keyframe_ratio * reference_points as f64;
    trigger && tracked >= cfg.min_inliers && mapping_idle
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn zero_velocity_predicts_previous_pose() {
        let prev = Pose::from_axis_angle(Vector3::new(0.1, 0.2, 0.3), Vector3::new(1.0, 2.0, 3.0));
        assert!(predict_pose(&prev, &VelocityModel::default()).max_difference(&prev) < 1e-15);
    }

    #[test]
    fn rotation_only_velocity_keeps_translation_arithmetic() {
        let prev = Pose::from_axis_angle(Vector3::zeros(), Vector3::new(1.0, 0.0, 0.0));
        let vel = VelocityModel {
            last_relative: Pose::from_axis_angle(Vector3::new(0.0, 0.0, 0.5), Vector3::zeros()),
        };
        let p = predict_pose(&prev, &vel);
        let expected = vel.last_relative.rotation() * prev.translation();
        assert!((p.translation() - expected).norm() < 1e-15);
    }
}
