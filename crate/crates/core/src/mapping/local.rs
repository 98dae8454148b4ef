use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Matrix3, Vector3};

use super::{KeyFrameId, Map, MapPointId};
use crate::features::{BestTwo, MatchThresholds};
use crate::geometry::{skew, triangulate, CameraIntrinsics, Projection, TriangulationConfig};
use crate::optim::{BaObservation, BaProblem, LmConfig, LmReport};
use crate::place_recognition::guided_pairs;

/// Minimum baseline relative to the median scene depth for a triangulation pair.
const MIN_BASELINE_RATIO: f64 = 0.01;
/// Cosine of the largest viewing angle to a point's mean normal accepted when fusing.
const MIN_VIEW_COS: f64 = 0.5;

fn median_depth(map: &Map, kf: KeyFrameId) -> Option<f64> {
    let k = map.keyframe(kf)?;
    let mut depths: Vec<f64> = k
        .points
        .iter()
        .flatten()
        .filter_map(|p| map.point(*p))
        .map(|p| k.pose.transform(&p.position.position).z)
        .collect();
    if depths.is_empty() {
        return None;
    }
    depths.sort_by(|a, b| a.total_cmp(b));
    Some(depths[(depths.len() - 1) / 2])
}

fn candidate_pairs(map: &Map, a: KeyFrameId, b: KeyFrameId) -> Vec<(usize, Vec<usize>)> {
    let ka = map.keyframe(a).unwrap();
    let kb = map.keyframe(b).unwrap();
    guided_pairs(
        &ka.features,
        ka.keypoints.len(),
        &kb.features,
        kb.keypoints.len(),
        |i| ka.points[i].is_none(),
        |j| kb.points[j].is_none(),
    )
}

/// Triangulates new map points between `kf` and its strongest covisibility neighbours from
/// unassociated features that pass the epipolar, parallax, depth and reprojection gates.
pub fn create_map_points(map: &mut Map, kf: KeyFrameId, k: &CameraIntrinsics, th: &MatchThresholds) -> Vec<MapPointId> {
    let cfg = map.config;
    let Some(k1) = map.keyframe(kf) else { return Vec::new() };
    let mut neighbors = k1.best_covisible(cfg.triangulation_neighbors);
    if neighbors.is_empty() {
        neighbors.extend(k1.parent);
    }
    let k_inv = Matrix3::new(1.0 / k.fx, 0.0, -k.cx / k.fx, 0.0, 1.0 / k.fy, -k.cy / k.fy, 0.0, 0.0, 1.0);
    let tri_cfg = TriangulationConfig {
        min_parallax_deg: cfg.min_parallax_deg,
    };
    let mut created = Vec::new();
    for n in neighbors {
        let (Some(ka), Some(kb)) = (map.keyframe(kf), map.keyframe(n)) else { continue };
        let baseline = (ka.pose.center() - kb.pose.center()).norm();
        if baseline < 1e-12 {
            continue;
        }
        if let Some(d) = median_depth(map, n) {
            if baseline / d < MIN_BASELINE_RATIO {
                continue;
            }
        }
        let rel = kb.pose.compose(&ka.pose.inverse());
        let f21 = k_inv.transpose() * skew(rel.translation()) * rel.rotation() * k_inv;
        let epipole = {
            let c1 = kb.pose.transform(&ka.pose.center());
            (c1.z > 0.0).then(|| k.project_unchecked(&c1))
        };
        let mut proposals: Vec<(f64, usize, usize)> = Vec::new();
        for (i, js) in candidate_pairs(map, kf, n) {
            let x1 = ka.keypoints[i].position();
            let line = f21 * Vector3::new(x1.x, x1.y, 1.0);
            let norm2 = line.x * line.x + line.y * line.y;
            if norm2 <= 0.0 {
                continue;
            }
            let mut best = BestTwo::empty();
            for j in js {
                let kp2 = &kb.keypoints[j];
                let sigma2 = kp2.scale * kp2.scale;
                let d_epi = (line.x * kp2.x + line.y * kp2.y + line.z).powi(2) / norm2;
                if d_epi >= cfg.epipolar_chi2 * sigma2 {
                    continue;
                }
                if let Some(e) = epipole {
                    if (kp2.position() - e).norm_squared() < 100.0 * sigma2 {
                        continue;
                    }
                }
                best.offer(j, ka.descriptors[i].distance(&kb.descriptors[j]));
            }
            if best.passes(th.th_high, th.ratio) {
                proposals.push((best.best, i, best.index));
            }
        }
        proposals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut used_j = BTreeSet::new();
        let mut accepted = Vec::new();
        for (_, i, j) in proposals {
            if !used_j.insert(j) {
                continue;
            }
            let (o1, o2) = (ka.keypoints[i].position(), kb.keypoints[j].position());
            let Ok(lm) = triangulate(&o1, &o2, &ka.pose, &kb.pose, k, &tri_cfg) else {
                continue;
            };
            let x = lm.position;
            let ok = [(&ka.pose, o1, ka.keypoints[i].scale), (&kb.pose, o2, kb.keypoints[j].scale)]
                .iter()
                .all(|(pose, obs, s)| match k.project_camera(&pose.transform(&x)) {
                    Projection::BehindCamera => false,
                    Projection::Visible(px) | Projection::OutOfView(px) => {
                        (px - obs).norm_squared() < cfg.reprojection_chi2 * s * s
                    }
                });
            if ok {
                accepted.push((i, j, x));
            }
        }
        for (i, j, x) in accepted {
            let still_free = map.keyframe(kf).unwrap().points[i].is_none() && map.keyframe(n).unwrap().points[j].is_none();
            if !still_free {
                continue;
            }
            if let Some(pid) = map.add_point(x, kf, i) {
                map.add_observation(pid, n, j);
                map.update_point_descriptor(pid);
                map.update_point_normal(pid);
                created.push(pid);
            }
        }
    }
    created
}

/// Projects `point` into `target` and associates or merges it with the best matching
/// keypoint. Returns true when the map changed.
pub(crate) fn fuse_into(map: &mut Map, target: KeyFrameId, point: MapPointId, k: &CameraIntrinsics, th: &MatchThresholds) -> bool {
    let (Some(kt), Some(p)) = (map.keyframe(target), map.point(point)) else { return false };
    if p.observations.contains_key(&target) {
        return false;
    }
    let x = p.position.position;
    let Projection::Visible(px) = k.project(&p.position, &kt.pose) else { return false };
    let ray = x - kt.pose.center();
    if ray.norm() <= 0.0 || ray.normalize().dot(&p.normal) < MIN_VIEW_COS {
        return false;
    }
    let max_scale = kt.keypoints.iter().map(|kp| kp.scale).fold(1.0, f64::max);
    let radius = map.config.fuse_radius * max_scale;
    let mut best: Option<(f64, usize)> = None;
    for j in kt.grid.within(&kt.keypoints, px.x, px.y, radius) {
        let kp = &kt.keypoints[j];
        if (kp.position() - px).norm_squared() >= map.config.reprojection_chi2 * kp.scale * kp.scale {
            continue;
        }
        let d = p.descriptor.distance(&kt.descriptors[j]);
        if d <= th.th_low && best.is_none_or(|b| d < b.0) {
            best = Some((d, j));
        }
    }
    let Some((_, j)) = best else { return false };
    match kt.points[j] {
        Some(q) if q == point => false,
        Some(q) => {
            let nq = map.point(q).map_or(0, |m| m.observations.len());
            if nq > p.observations.len() {
                map.replace_point(point, q);
            } else {
                map.replace_point(q, point);
            }
            true
        }
        None => map.add_observation(point, target, j),
    }
}

/// Merges duplicate map points between `kf` and its first- and second-order neighbours.
pub fn fuse(map: &mut Map, kf: KeyFrameId, k: &CameraIntrinsics, th: &MatchThresholds) -> usize {
    let Some(kk) = map.keyframe(kf) else { return 0 };
    let mut targets: BTreeSet<KeyFrameId> = BTreeSet::new();
    for n in kk.best_covisible(10) {
        targets.insert(n);
        if let Some(nk) = map.keyframe(n) {
            targets.extend(nk.best_covisible(5));
        }
    }
    targets.remove(&kf);
    let mut changes = 0;
    for t in &targets {
        let pts: Vec<MapPointId> = map.keyframe(kf).map(|k| k.points.iter().flatten().copied().collect()).unwrap_or_default();
        for p in pts {
            changes += usize::from(fuse_into(map, *t, p, k, th));
        }
    }
    let candidates = map.points_of(&targets);
    for p in candidates {
        changes += usize::from(fuse_into(map, kf, p, k, th));
    }
    if let Some(kk) = map.keyframe(kf) {
        let pts: Vec<MapPointId> = kk.points.iter().flatten().copied().collect();
        for p in pts {
            map.update_point_descriptor(p);
            map.update_point_normal(p);
        }
    }
    map.update_connections(kf);
    for t in targets {
        if map.keyframe(t).is_some() {
            map.update_connections(t);
        }
    }
    changes
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalBaReport {
    pub first: LmReport,
    pub second: LmReport,
    pub optimized_keyframes: usize,
    pub fixed_keyframes: usize,
    pub points: usize,
    pub removed_observations: usize,
}

/// Jointly refines `kf`, its covisible keyframes and all their points. Keyframes that see
/// those points but are not covisible are held fixed, as is the map origin.
pub fn local_bundle_adjustment(map: &mut Map, kf: KeyFrameId, k: &CameraIntrinsics) -> LocalBaReport {
    let mut report = LocalBaReport::default();
    let Some(kk) = map.keyframe(kf) else { return report };
    let mut local: BTreeSet<KeyFrameId> = kk.covisibility.keys().copied().collect();
    local.insert(kf);
    if local.len() < 2 {
        return report;
    }
    let points = map.points_of(&local);
    let mut fixed: BTreeSet<KeyFrameId> = points
        .iter()
        .flat_map(|p| map.point(*p).unwrap().observations.keys().copied())
        .filter(|o| !local.contains(o))
        .collect();
    if let Some(origin) = map.origin() {
        if local.remove(&origin) {
            fixed.insert(origin);
        }
    }
    if fixed.is_empty() {
        let first = *local.iter().next().unwrap();
        local.remove(&first);
        fixed.insert(first);
    }
    let mut problem = BaProblem::default();
    let mut pose_slot: BTreeMap<KeyFrameId, usize> = BTreeMap::new();
    for id in local.iter().chain(fixed.iter()) {
        let slot = problem.add_pose(map.keyframe(*id).unwrap().pose, fixed.contains(id));
        pose_slot.insert(*id, slot);
    }
    let mut point_slot: Vec<MapPointId> = Vec::with_capacity(points.len());
    let mut obs_refs: Vec<(MapPointId, KeyFrameId)> = Vec::new();
    for pid in &points {
        let p = map.point(*pid).unwrap();
        let slot = problem.add_point(p.position.position, false);
        point_slot.push(*pid);
        for (o, idx) in &p.observations {
            let Some(&ps) = pose_slot.get(o) else { continue };
            let okf = map.keyframe(*o).unwrap();
            problem.add_observation(BaObservation {
                pose: ps,
                point: slot,
                pixel: okf.keypoints[*idx].position(),
                inv_sigma2: okf.inv_sigma2(*idx),
            });
            obs_refs.push((*pid, *o));
        }
    }
    let cfg = map.config;
    report.first = problem.optimize(
        k,
        &LmConfig {
            max_iterations: cfg.ba_first_iterations,
            ..Default::default()
        },
    );
    problem.classify_outliers(k, cfg.reprojection_chi2);
    report.second = problem.optimize(
        k,
        &LmConfig {
            max_iterations: cfg.ba_second_iterations,
            ..Default::default()
        },
    );
    problem.classify_outliers(k, cfg.reprojection_chi2);

    for id in &local {
        map.set_keyframe_pose(*id, problem.poses[pose_slot[id]]);
    }
    for (slot, pid) in point_slot.iter().enumerate() {
        map.set_point_position(*pid, problem.points[slot]);
    }
    for (i, (pid, o)) in obs_refs.iter().enumerate() {
        if !problem.active[i] {
            map.erase_observation(*pid, *o);
            report.removed_observations += 1;
        }
    }
    for pid in &point_slot {
        map.update_point_normal(*pid);
    }
    let touched: BTreeSet<KeyFrameId> = local.iter().chain(fixed.iter()).copied().collect();
    if report.removed_observations > 0 {
        for id in touched {
            if map.keyframe(id).is_some() {
                map.update_connections(id);
            }
        }
    }
    report.optimized_keyframes = local.len();
    report.fixed_keyframes = fixed.len();
    report.points = point_slot.len();
    report
}

/// Drops recently created points that were rarely found when visible or that failed to
/// gain observers within their creation window. `recent` is pruned in place.
pub fn cull_map_points(map: &mut Map, recent: &mut Vec<MapPointId>) -> usize {
    let cfg = map.config;
    let now = map.insertions();
    let mut removed = 0;
    recent.retain(|pid| {
        let Some(p) = map.point(*pid) else { return false };
        let age = now.saturating_sub(p.created_at);
        if p.found_ratio() < cfg.min_found_ratio {
            map.erase_point(*pid);
            removed += 1;
            false
        } else if age >= cfg.point_window {
            if p.observations.len() < cfg.min_point_observers {
                map.erase_point(*pid);
                removed += 1;
            }
            false
        } else {
            true
        }
    });
    removed
}

/// Removes covisible neighbours of `kf` whose points are mostly seen by enough other
/// keyframes at an equal or finer scale. The origin, loop keyframes and `protected`
/// keyframes are kept.
pub fn cull_keyframes(map: &mut Map, kf: KeyFrameId, protected: &BTreeSet<KeyFrameId>) -> Vec<KeyFrameId> {
    let cfg = map.config;
    let Some(kk) = map.keyframe(kf) else { return Vec::new() };
    let candidates: Vec<KeyFrameId> = kk.covisibility.keys().copied().collect();
    let mut removed = Vec::new();
    for c in candidates {
        if Some(c) == map.origin() || protected.contains(&c) || c == kf {
            continue;
        }
        let Some(ck) = map.keyframe(c) else { continue };
        if !ck.loop_edges.is_empty() {
            continue;
        }
        let mut total = 0usize;
        let mut redundant = 0usize;
        for (idx, pid) in ck.points.iter().enumerate() {
            let Some(p) = pid.and_then(|p| map.point(p)) else { continue };
            total += 1;
            let octave = ck.keypoints[idx].octave;
            let others = p
                .observations
                .iter()
                .filter(|(o, oi)| **o != c && map.keyframe(**o).is_some_and(|ok| ok.keypoints[**oi].octave <= octave))
                .count();
            if others >= cfg.redundant_observers {
                redundant += 1;
            }
        }
        if total > 0 && redundant as f64 >= cfg.redundancy * total as f64 && map.remove_keyframe(c) {
            removed.push(c);
        }
    }
    removed
}
