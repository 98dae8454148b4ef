use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{guided_pairs, score, KeyFrameDatabase};
use crate::features::{BestTwo, MatchThresholds};
use crate::geometry::{umeyama, CameraIntrinsics, SimTransform};
use crate::mapping::{fuse_into, KeyFrameId, Map, MapPointId};
use crate::optim::{PoseGraph, PoseGraphReport, SimEdge, CHI2_2DOF_99};
use crate::tracking::{search_by_projection, ProjectionSearch};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    /// Keyframes to insert before detection starts, and again after each closure.
    pub warmup_keyframes: usize,
    /// Consecutive keyframes whose candidate groups must overlap.
    pub consistency: usize,
    pub min_inliers: usize,
    /// Estimate a rigid transform instead of a similarity.
    pub fix_scale: bool,
    pub inlier_chi2: f64,
    pub ransac_iterations: usize,
    pub pose_graph_iterations: usize,
    /// Minimum covisibility weight for an edge to join the pose graph.
    pub essential_min_weight: usize,
    /// Points of both sides closer than this after correction are merged.
    pub fuse_distance: f64,
    /// Candidates scoring below this fraction of the best are dropped.
    pub candidate_ratio: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            warmup_keyframes: 10,
            consistency: 3,
            min_inliers: 20,
            fix_scale: false,
            inlier_chi2: CHI2_2DOF_99,
            ransac_iterations: 300,
            pose_graph_iterations: 20,
            essential_min_weight: 100,
            fuse_distance: 0.01,
            candidate_ratio: 0.75,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoopCandidate {
    pub query: KeyFrameId,
    pub matched: KeyFrameId,
    pub score: f64,
    pub consistency: usize,
}

/// Tracks candidate groups across consecutive keyframes and reports those that stay
/// consistent long enough.
#[derive(Clone, Debug, Default)]
pub struct LoopDetector {
    pub config: LoopConfig,
    groups: Vec<(BTreeSet<KeyFrameId>, usize)>,
    last_closure: Option<usize>,
}

impl LoopDetector {
    pub fn new(config: LoopConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    /// Records a closure so that detection pauses for the warm-up period.
    pub fn mark_closed(&mut self, insertions: usize) {
        self.last_closure = Some(insertions);
        self.groups.clear();
    }

    pub fn detect(&mut self, map: &Map, db: &KeyFrameDatabase, kf: KeyFrameId) -> Vec<LoopCandidate> {
        let cfg = self.config;
        let Some(k) = map.keyframe(kf) else { return Vec::new() };
        let now = map.insertions();
        let warming = now < cfg.warmup_keyframes || self.last_closure.is_some_and(|l| now < l + cfg.warmup_keyframes);
        if k.bow.is_empty() || warming {
            self.groups.clear();
            return Vec::new();
        }
        let min_score = k
            .covisibility
            .keys()
            .filter_map(|n| map.keyframe(*n))
            .filter(|n| !n.bow.is_empty())
            .map(|n| score(&k.bow, &n.bow))
            .fold(None, |acc: Option<f64>, s| Some(acc.map_or(s, |a| a.min(s))))
            .unwrap_or(0.0);
        let exclude = map.connected_group(kf);
        let candidates: Vec<(KeyFrameId, f64)> = db
            .query(&k.bow, &exclude, min_score)
            .into_iter()
            .filter(|(c, _)| map.keyframe(*c).is_some())
            .collect();
        let Some(best) = candidates.first().map(|c| c.1) else {
            self.groups.clear();
            return Vec::new();
        };
        let mut next = Vec::new();
        let mut out = Vec::new();
        for (c, s) in candidates.into_iter().filter(|(_, s)| *s >= cfg.candidate_ratio * best) {
            let group = map.connected_group(c);
            let count = self
                .groups
                .iter()
                .filter(|(g, _)| !g.is_disjoint(&group))
                .map(|(_, n)| n + 1)
                .max()
                .unwrap_or(1);
            if count >= cfg.consistency {
                out.push(LoopCandidate {
                    query: kf,
                    matched: c,
                    score: s,
                    consistency: count,
                });
            }
            next.push((group, count));
        }
        self.groups = next;
        out
    }
}

/// Similarity between a loop candidate and the query keyframe.
#[derive(Clone, Debug, PartialEq)]
pub struct LoopTransform {
    pub query: KeyFrameId,
    pub matched: KeyFrameId,
    /// Maps matched-camera coordinates to query-camera coordinates.
    pub relative: SimTransform,
    /// Corrected world-to-camera similarity of the query keyframe.
    pub corrected: SimTransform,
    /// Query keypoint index and the matched-side map point it sees.
    pub matches: Vec<(usize, MapPointId)>,
    pub inliers: usize,
}

fn reprojects(k: &CameraIntrinsics, pc: &Vector3<f64>, obs: &nalgebra::Vector2<f64>, scale: f64, chi2: f64) -> bool {
    pc.z > 0.0 && (k.project_unchecked(pc) - obs).norm_squared() < chi2 * scale * scale
}

/// Estimates the similarity closing a loop from matched map points with RANSAC over
/// three-point Umeyama fits, then gathers further matches by projection.
pub fn compute_loop_transform(
    map: &Map,
    candidate: &LoopCandidate,
    k: &CameraIntrinsics,
    th: &MatchThresholds,
    cfg: &LoopConfig,
    seed: u64,
) -> Option<LoopTransform> {
    let q = map.keyframe(candidate.query)?;
    let m = map.keyframe(candidate.matched)?;
    let pairs = guided_pairs(
        &q.features,
        q.keypoints.len(),
        &m.features,
        m.keypoints.len(),
        |i| q.points[i].is_some_and(|p| map.point(p).is_some()),
        |j| m.points[j].is_some_and(|p| map.point(p).is_some()),
    );
    let mut by_j: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (i, js) in pairs {
        let mut best = BestTwo::empty();
        for j in js {
            let pm = map.point(m.points[j].unwrap()).unwrap();
            best.offer(j, q.descriptors[i].distance(&pm.descriptor));
        }
        if best.passes(th.th_low, th.ratio) && by_j.get(&best.index).is_none_or(|(d, _)| best.best < *d) {
            by_j.insert(best.index, (best.best, i));
        }
    }
    struct Corr {
        i: usize,
        j: usize,
        p1: Vector3<f64>,
        p2: Vector3<f64>,
    }
    let corr: Vec<Corr> = by_j
        .into_iter()
        .map(|(j, (_, i))| {
            let xq = map.point(q.points[i].unwrap()).unwrap().position.position;
            let xm = map.point(m.points[j].unwrap()).unwrap().position.position;
            Corr {
                i,
                j,
                p1: q.pose.transform(&xq),
                p2: m.pose.transform(&xm),
            }
        })
        .collect();
    if corr.len() < cfg.min_inliers.max(3) {
        return None;
    }
    let inliers_of = |s: &SimTransform| -> Vec<usize> {
        let inv = s.inverse();
        (0..corr.len())
            .filter(|&c| {
                let cc = &corr[c];
                reprojects(k, &s.apply(&cc.p2), &q.keypoints[cc.i].position(), q.keypoints[cc.i].scale, cfg.inlier_chi2)
                    && reprojects(k, &inv.apply(&cc.p1), &m.keypoints[cc.j].position(), m.keypoints[cc.j].scale, cfg.inlier_chi2)
            })
            .collect()
    };
    let fit = |idx: &[usize]| -> Option<SimTransform> {
        let src: Vec<Vector3<f64>> = idx.iter().map(|&c| corr[c].p2).collect();
        let dst: Vec<Vector3<f64>> = idx.iter().map(|&c| corr[c].p1).collect();
        umeyama(&src, &dst, !cfg.fix_scale).ok()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(SimTransform, Vec<usize>)> = None;
    for _ in 0..cfg.ransac_iterations {
        let pick: Vec<usize> = sample(&mut rng, corr.len(), 3).into_vec();
        let Some(s) = fit(&pick) else { continue };
        let inl = inliers_of(&s);
        if best.as_ref().is_none_or(|(_, b)| inl.len() > b.len()) {
            best = Some((s, inl));
        }
    }
    let (mut relative, mut inliers) = best?;
    if inliers.len() < cfg.min_inliers {
        return None;
    }
    if let Some(s) = fit(&inliers) {
        let inl = inliers_of(&s);
        if inl.len() >= inliers.len() {
            relative = s;
            inliers = inl;
        }
    }
    let corrected = relative.compose(&SimTransform::from_pose(&m.pose));

    let mut matches: BTreeMap<usize, MapPointId> =
        inliers.iter().map(|&c| (corr[c].i, m.points[corr[c].j].unwrap())).collect();
    let taken: Vec<Option<MapPointId>> = (0..q.keypoints.len()).map(|i| matches.get(&i).copied()).collect();
    let group: Vec<MapPointId> = map
        .points_of(&map.connected_group(candidate.matched))
        .into_iter()
        .filter(|p| !matches.values().any(|v| v == p))
        .collect();
    let params = ProjectionSearch {
        radius: 10.0,
        limit: th.th_low,
        ratio: 1.0,
    };
    let center = corrected.inverse().apply(&Vector3::zeros());
    for (i, p, _) in search_by_projection(
        map,
        &q.keypoints,
        &q.descriptors,
        &q.grid,
        &taken,
        |x| corrected.apply(x),
        center,
        &group,
        k,
        &params,
    ) {
        matches.insert(i, p);
    }
    Some(LoopTransform {
        query: candidate.query,
        matched: candidate.matched,
        relative,
        corrected,
        matches: matches.into_iter().collect(),
        inliers: inliers.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoopCorrection {
    pub query: KeyFrameId,
    pub matched: KeyFrameId,
    /// Norm of the loop-edge residual before correction.
    pub residual_before: f64,
    /// Norm of the loop-edge residual after pose-graph optimization.
    pub residual_after: f64,
    pub corrected_keyframes: usize,
    pub fused: usize,
    pub graph: PoseGraphReport,
}

fn reference_in(map: &Map, p: MapPointId, among: &BTreeMap<KeyFrameId, SimTransform>) -> Option<KeyFrameId> {
    let pt = map.point(p)?;
    if among.contains_key(&pt.reference) {
        return Some(pt.reference);
    }
    pt.observations.keys().find(|k| among.contains_key(k)).copied()
}

/// Applies a loop closure: moves the query's covisible group to the corrected pose,
/// merges duplicated points, links the two keyframes and spreads the remaining error
/// through a similarity pose graph with the matched keyframe held fixed.
pub fn correct_loop(
    map: &mut Map,
    lt: &LoopTransform,
    k: &CameraIntrinsics,
    th: &MatchThresholds,
    cfg: &LoopConfig,
) -> Option<LoopCorrection> {
    let (qid, mid) = (lt.query, lt.matched);
    map.keyframe(qid)?;
    map.keyframe(mid)?;
    let uncorrected: BTreeMap<KeyFrameId, SimTransform> =
        map.keyframes().iter().map(|(id, kf)| (*id, SimTransform::from_pose(&kf.pose))).collect();
    let loop_measurement = lt.corrected.compose(&uncorrected[&mid].inverse());
    let loop_edge = SimEdge {
        from: 0,
        to: 0,
        measurement: loop_measurement,
        weight: 1.0,
    };
    let residual_before = PoseGraph::edge_residual(&loop_edge, &uncorrected[&qid], &uncorrected[&mid]).norm();

    // rigidly move the query's group
    let group = map.connected_group(qid);
    let tq_inv = map.keyframe(qid).unwrap().pose.inverse();
    let mut corrected: BTreeMap<KeyFrameId, SimTransform> = BTreeMap::new();
    for g in &group {
        let rel = SimTransform::from_pose(&map.keyframe(*g).unwrap().pose.compose(&tq_inv));
        corrected.insert(*g, rel.compose(&lt.corrected));
    }
    for p in map.points_of(&group) {
        let Some(r) = reference_in(map, p, &corrected) else { continue };
        let x = map.point(p).unwrap().position.position;
        let moved = corrected[&r].inverse().apply(&uncorrected[&r].apply(&x));
        map.set_point_position(p, moved);
    }
    for (g, s) in &corrected {
        map.set_keyframe_pose(*g, s.to_pose());
    }

    // merge the two sides
    let mut fused = 0;
    for (i, pm) in &lt.matches {
        if map.point(*pm).is_none() {
            continue;
        }
        match map.keyframe(qid).unwrap().points[*i] {
            Some(e) if e == *pm => {}
            Some(e) => {
                map.replace_point(e, *pm);
                fused += 1;
            }
            None => {
                if map.add_observation(*pm, qid, *i) {
                    fused += 1;
                }
            }
        }
    }
    let matched_group = map.connected_group(mid);
    let matched_points = map.points_of(&matched_group);
    for g in &group {
        for p in &matched_points {
            if map.point(*p).is_some() && fuse_into(map, *g, *p, k, th) {
                fused += 1;
            }
        }
    }
    fused += merge_close_points(map, &map.points_of(&group), &matched_points, cfg.fuse_distance, th.th_low);
    for g in group.iter().chain(matched_group.iter()) {
        if map.keyframe(*g).is_some() {
            map.update_connections(*g);
        }
    }
    map.keyframe_mut(qid).unwrap().loop_edges.insert(mid);
    map.keyframe_mut(mid).unwrap().loop_edges.insert(qid);

    // essential graph
    let ids: Vec<KeyFrameId> = map.keyframes().keys().copied().collect();
    let slot: BTreeMap<KeyFrameId, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut graph = PoseGraph::default();
    let mut initial = Vec::with_capacity(ids.len());
    for id in &ids {
        let s = corrected.get(id).copied().unwrap_or(uncorrected[id]);
        initial.push(s);
        graph.add_node(s, *id == mid);
    }
    let mut seen: BTreeSet<(KeyFrameId, KeyFrameId)> = BTreeSet::new();
    seen.insert((qid.min(mid), qid.max(mid)));
    let mut add_edge = |graph: &mut PoseGraph, a: KeyFrameId, b: KeyFrameId| {
        let key = (a.min(b), a.max(b));
        if a == b || !seen.insert(key) {
            return;
        }
        graph.edges.push(SimEdge {
            from: slot[&a],
            to: slot[&b],
            measurement: uncorrected[&a].compose(&uncorrected[&b].inverse()),
            weight: 1.0,
        });
    };
    for id in &ids {
        let kf = map.keyframe(*id).unwrap();
        if let Some(p) = kf.parent.filter(|p| slot.contains_key(p)) {
            add_edge(&mut graph, *id, p);
        }
        for l in kf.loop_edges.iter().filter(|l| slot.contains_key(l)) {
            add_edge(&mut graph, *id, *l);
        }
        for (n, w) in &kf.covisibility {
            if *w >= cfg.essential_min_weight && slot.contains_key(n) {
                add_edge(&mut graph, *id, *n);
            }
        }
    }
    graph.edges.push(SimEdge {
        from: slot[&qid],
        to: slot[&mid],
        measurement: loop_measurement,
        weight: 1.0,
    });
    let loop_index = graph.edges.len() - 1;
    let report = graph.optimize(cfg.pose_graph_iterations);
    let residual_after = graph.residual_norm(loop_index);

    let solved: BTreeMap<KeyFrameId, (SimTransform, SimTransform)> =
        ids.iter().enumerate().map(|(i, id)| (*id, (initial[i], graph.nodes[i]))).collect();
    let point_ids: Vec<MapPointId> = map.points().keys().copied().collect();
    let before_only: BTreeMap<KeyFrameId, SimTransform> = solved.iter().map(|(k, v)| (*k, v.0)).collect();
    for p in point_ids {
        let Some(r) = reference_in(map, p, &before_only) else { continue };
        let (before, after) = solved[&r];
        let x = map.point(p).unwrap().position.position;
        map.set_point_position(p, after.inverse().apply(&before.apply(&x)));
    }
    for (id, (_, after)) in &solved {
        map.set_keyframe_pose(*id, after.to_pose());
    }
    let pts: Vec<MapPointId> = map.points().keys().copied().collect();
    for p in pts {
        map.update_point_normal(p);
    }
    Some(LoopCorrection {
        query: qid,
        matched: mid,
        residual_before,
        residual_after,
        corrected_keyframes: corrected.len(),
        fused,
        graph: report,
    })
}

/// Merges points of `a` into nearby points of `b` with similar descriptors.
fn merge_close_points(map: &mut Map, a: &BTreeSet<MapPointId>, b: &BTreeSet<MapPointId>, distance: f64, limit: f64) -> usize {
    if distance <= 0.0 {
        return 0;
    }
    let cell = |x: &Vector3<f64>| -> [i64; 3] { [0, 1, 2].map(|i| (x[i] / distance).floor() as i64) };
    let mut grid: BTreeMap<[i64; 3], Vec<MapPointId>> = BTreeMap::new();
    for p in b {
        if let Some(pt) = map.point(*p) {
            grid.entry(cell(&pt.position.position)).or_default().push(*p);
        }
    }
    let mut merged = 0;
    for p in a {
        let Some(pt) = map.point(*p) else { continue };
        if b.contains(p) {
            continue;
        }
        let x = pt.position.position;
        let c = cell(&x);
        let mut target = None;
        'search: for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(list) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else { continue };
                    for q in list {
                        let Some(qp) = map.point(*q) else { continue };
                        if (qp.position.position - x).norm() < distance && qp.descriptor.distance(&pt.descriptor) <= limit {
                            target = Some(*q);
                            break 'search;
                        }
                    }
                }
            }
        }
        if let Some(q) = target {
            map.replace_point(*p, q);
            merged += 1;
        }
    }
    merged
}
