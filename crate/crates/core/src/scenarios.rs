//! Scripted back-end scenarios with exact ground truth. The planted-drift loop builds a
//! map along a closed circular path whose keyframes and points carry a similarity error
//! that grows with distance travelled, then runs loop detection and correction on it.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dataset::{generate_synthetic, FramePayload, PathKind, SceneConfig};
use crate::evaluation::{compute_ate, Trajectory, TrajectoryEntry};
use crate::features::MatchThresholds;
use crate::geometry::SimTransform;
use crate::mapping::{insert_keyframe, Frame, Map, MapPointId, MappingConfig};
use crate::place_recognition::{
    compute_loop_transform, correct_loop, train_vocabulary, KeyFrameDatabase, LoopConfig, LoopCorrection, LoopDetector,
    LoopTransform,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftScenario {
    pub scene: SceneConfig,
    /// Every n-th frame becomes a keyframe.
    pub keyframe_step: usize,
    /// Drift reached at the last keyframe: rotation vector, translation and log scale.
    pub rotation_drift: [f64; 3],
    pub translation_drift: [f64; 3],
    pub log_scale_drift: f64,
    /// A landmark unseen for more than this many keyframes is mapped again as a new point.
    pub track_gap: usize,
    pub vocab_k: usize,
    pub vocab_levels: usize,
    pub loops: LoopConfig,
}

impl Default for DriftScenario {
    fn default() -> Self {
        Self {
            scene: SceneConfig {
                path: PathKind::Loop,
                landmarks: 1500,
                frames: 100,
                ..Default::default()
            },
            keyframe_step: 2,
            rotation_drift: [0.0, 0.08, 0.03],
            translation_drift: [0.3, -0.1, 0.2],
            log_scale_drift: 0.15,
            track_gap: 3,
            vocab_k: 10,
            vocab_levels: 3,
            loops: LoopConfig::default(),
        }
    }
}

impl DriftScenario {
    /// Drift of the estimate at path fraction `u`, mapping true world coordinates into
    /// the drifted estimate's coordinates.
    pub fn drift_at(&self, u: f64) -> SimTransform {
        let w = Vector3::from(self.rotation_drift) * u;
        let t = Vector3::from(self.translation_drift) * u;
        SimTransform::from_params(&w, &t, self.log_scale_drift * u)
    }
}

#[derive(Clone, Debug)]
pub struct DriftOutcome {
    /// Keyframe trajectory ATE just before and right after the correction.
    pub ate_before: f64,
    pub ate_after: f64,
    pub transform: LoopTransform,
    pub correction: LoopCorrection,
    /// Keyframes inserted before the loop was confirmed.
    pub keyframes: usize,
    pub map: Map,
}

fn keyframe_trajectory(map: &Map) -> Trajectory {
    let entries = map
        .keyframes()
        .values()
        .map(|k| TrajectoryEntry {
            timestamp: k.timestamp,
            pose: k.pose,
            frame_id: k.frame_id,
        })
        .collect();
    Trajectory::new(entries).unwrap_or_default()
}

/// Builds the drifted map keyframe by keyframe, checks every insertion for a loop and
/// applies the first verified closure. Returns `Err` when no loop is closed.
pub fn run_drift_scenario(sc: &DriftScenario, seed: u64) -> Result<DriftOutcome, String> {
    if sc.keyframe_step == 0 {
        return Err("keyframe_step must be positive".into());
    }
    let (scene, source) = generate_synthetic(&sc.scene, seed)?;
    let k = source.intrinsics;
    let corpus: Vec<_> = source
        .iter()
        .step_by(5)
        .filter_map(|f| match &f.payload {
            FramePayload::Features { descriptors, .. } => Some(descriptors.clone()),
            _ => None,
        })
        .collect();
    let vocab = train_vocabulary(&corpus, sc.vocab_k, sc.vocab_levels, seed).map_err(|e| e.to_string())?;
    let th = match corpus.iter().flatten().next() {
        Some(d) => MatchThresholds::for_kind(d.kind()),
        None => return Err("scene produced no features".into()),
    };

    let mut map = Map::new(MappingConfig::default());
    let mut db = KeyFrameDatabase::new();
    let mut detector = LoopDetector::new(sc.loops);
    // landmark -> (point, index of the keyframe that last observed it)
    let mut tracks: BTreeMap<usize, (MapPointId, usize)> = BTreeMap::new();
    let kf_frames: Vec<usize> = (0..source.len()).step_by(sc.keyframe_step).collect();
    let last = kf_frames.len().saturating_sub(1).max(1) as f64;

    for (n, &fi) in kf_frames.iter().enumerate() {
        let sf = &source.frames()[fi];
        let FramePayload::Features { keypoints, descriptors } = &sf.payload else {
            return Err("scenario needs feature payloads".into());
        };
        let drift = sc.drift_at(n as f64 / last);
        let truth = scene.trajectory.entries()[fi].pose;
        let mut frame = Frame::new(sf.index, sf.timestamp, keypoints.clone(), descriptors.clone(), &k).map_err(|e| e.to_string())?;
        frame.pose = SimTransform::from_pose(&truth).compose(&drift.inverse()).to_pose();
        let labels = &scene.labels[fi];
        let mut fresh = Vec::new();
        for (idx, l) in labels.iter().enumerate() {
            let Some(l) = l else { continue };
            match tracks.get(l) {
                Some((p, seen)) if n - seen <= sc.track_gap && map.point(*p).is_some() => frame.map_points[idx] = Some(*p),
                _ => fresh.push((idx, *l)),
            }
        }
        let kf = insert_keyframe(&mut map, &frame, Some(&vocab), Some(&mut db));
        for (idx, p) in frame.map_points.iter().enumerate() {
            if let (Some(p), Some(l)) = (p, labels[idx]) {
                tracks.insert(l, (*p, n));
            }
        }
        for (idx, l) in fresh {
            if let Some(p) = map.add_point(drift.apply(&scene.landmarks[l].position), kf, idx) {
                tracks.insert(l, (p, n));
            }
        }
        map.update_connections(kf);

        let candidates = detector.detect(&map, &db, kf);
        let found = candidates
            .iter()
            .find_map(|c| compute_loop_transform(&map, c, &k, &th, &sc.loops, seed ^ c.matched.0));
        if let Some(lt) = found {
            let ate_before = ate(&map, &scene.trajectory)?;
            let correction =
                correct_loop(&mut map, &lt, &k, &th, &sc.loops).ok_or_else(|| "loop correction failed".to_string())?;
            let ate_after = ate(&map, &scene.trajectory)?;
            return Ok(DriftOutcome {
                ate_before,
                ate_after,
                transform: lt,
                correction,
                keyframes: n + 1,
                map,
            });
        }
    }
    Err(format!("no loop closed over {} keyframes", kf_frames.len()))
}

fn ate(map: &Map, truth: &Trajectory) -> Result<f64, String> {
    compute_ate(&keyframe_trajectory(map), truth, true, 1e-6)
        .map(|a| a.rmse)
        .map_err(|e| e.to_string())
}
