//! The full monocular pipeline: per-frame tracking, keyframe-driven local mapping, and
//! loop detection running beside them.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use crate::evaluation::{Trajectory, TrajectoryEntry};
use crate::features::{
    detect_and_describe, Descriptor, DetectorConfig, FeatureError, Keypoint, MatchThresholds, PyramidConfig,
};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::imaging::GrayImage;
use crate::mapping::{
    create_map_points, cull_keyframes, cull_map_points, fuse, insert_keyframe, local_bundle_adjustment, Frame,
    KeyFrameId, Map, MapPointId, MappingConfig,
};
use crate::place_recognition::{
    compute_loop_transform, correct_loop, relocalize, KeyFrameDatabase, LoopConfig, LoopCorrection, LoopDetector,
    LoopTransform, Vocabulary,
};
use crate::tracking::{
    initialize_map, need_keyframe, predict_pose, track_frame, InitError, TrackingConfig, TrackingState, TrackingStatus,
    VelocityModel,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopMode {
    Off,
    /// Detection runs on the mapping thread right after each keyframe.
    Inline,
    /// Detection runs on a worker over a snapshot and is joined at the next frame.
    #[default]
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlamConfig {
    pub pyramid: PyramidConfig,
    pub detector: DetectorConfig,
    pub features_per_frame: usize,
    /// Matching thresholds; derived from the descriptor variant when absent.
    pub thresholds: Option<MatchThresholds>,
    pub tracking: TrackingConfig,
    pub mapping: MappingConfig,
    pub loops: LoopConfig,
    pub loop_mode: LoopMode,
    /// Frames the first initialization frame is kept before it is replaced.
    pub init_patience: usize,
}

impl Default for SlamConfig {
    fn default() -> Self {
        Self {
            pyramid: PyramidConfig::default(),
            detector: DetectorConfig::default(),
            features_per_frame: 1000,
            thresholds: None,
            tracking: TrackingConfig::default(),
            mapping: MappingConfig::default(),
            loops: LoopConfig::default(),
            loop_mode: LoopMode::Background,
            init_patience: 30,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameStatus {
    Initializing,
    Initialized,
    Tracked,
    TrackedKeyFrame,
    Relocalized,
    Lost,
}

#[derive(Clone, Copy, Debug)]
struct FrameRecord {
    frame_id: u64,
    timestamp: f64,
    reference: KeyFrameId,
    /// `T_frame * T_reference^-1` at tracking time.
    relative: Pose,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SystemStats {
    pub frames: usize,
    pub tracked: usize,
    pub lost: usize,
    pub keyframes_inserted: usize,
    pub relocalizations: usize,
    pub init_attempts: usize,
    pub loop_corrections: Vec<LoopCorrection>,
    /// Local bundle adjustments whose accepted steps ever increased the cost.
    pub non_monotone_ba: usize,
    pub local_ba_runs: usize,
}

type LoopJob = JoinHandle<(LoopDetector, Option<LoopTransform>)>;

pub struct System {
    config: SlamConfig,
    intrinsics: CameraIntrinsics,
    vocab: Option<Arc<Vocabulary>>,
    thresholds: Option<MatchThresholds>,
    seed: u64,
    map: Map,
    db: KeyFrameDatabase,
    detector: Option<LoopDetector>,
    pending_loop: Option<LoopJob>,
    state: TrackingState,
    velocity: VelocityModel,
    last_frame: Option<Frame>,
    init_frame: Option<Frame>,
    records: Vec<FrameRecord>,
    recent_points: Vec<MapPointId>,
    stats: SystemStats,
}

fn detect_loop(
    mut detector: LoopDetector,
    map: &Map,
    db: &KeyFrameDatabase,
    kf: KeyFrameId,
    k: &CameraIntrinsics,
    th: &MatchThresholds,
    seed: u64,
) -> (LoopDetector, Option<LoopTransform>) {
    let candidates = detector.detect(map, db, kf);
    let cfg = detector.config;
    let found = candidates
        .iter()
        .find_map(|c| compute_loop_transform(map, c, k, th, &cfg, seed ^ c.matched.0));
    (detector, found)
}

impl System {
    pub fn new(config: SlamConfig, intrinsics: CameraIntrinsics, vocab: Option<Vocabulary>, seed: u64) -> Self {
        let detector = (config.loop_mode != LoopMode::Off && vocab.is_some()).then(|| LoopDetector::new(config.loops));
        Self {
            map: Map::new(config.mapping),
            thresholds: config.thresholds,
            config,
            intrinsics,
            vocab: vocab.map(Arc::new),
            seed,
            db: KeyFrameDatabase::new(),
            detector,
            pending_loop: None,
            state: TrackingState::default(),
            velocity: VelocityModel::default(),
            last_frame: None,
            init_frame: None,
            records: Vec::new(),
            recent_points: Vec::new(),
            stats: SystemStats::default(),
        }
    }

    pub fn map(&self) -> &Map {
        &self.map
    }

    pub fn state(&self) -> &TrackingState {
        &self.state
    }

    pub fn stats(&self) -> &SystemStats {
        &self.stats
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    /// Detects features with the built-in front-end and processes the frame.
    pub fn process_image(&mut self, frame_id: u64, timestamp: f64, image: &GrayImage) -> Result<FrameStatus, FeatureError> {
        let (kps, descs) = detect_and_describe(image, &self.config.pyramid, self.config.features_per_frame, &self.config.detector)?;
        self.process_features(frame_id, timestamp, kps, descs)
    }

    pub fn process_features(
        &mut self,
        frame_id: u64,
        timestamp: f64,
        keypoints: Vec<Keypoint>,
        descriptors: Vec<Descriptor>,
    ) -> Result<FrameStatus, FeatureError> {
        let frame = Frame::new(frame_id, timestamp, keypoints, descriptors, &self.intrinsics)?;
        if self.thresholds.is_none() {
            if let Some(d) = frame.descriptors.first() {
                self.thresholds = Some(MatchThresholds::for_kind(d.kind()));
            }
        }
        self.join_loop();
        self.stats.frames += 1;
        let status = match self.state.status {
            TrackingStatus::NotInitialized => self.initialize(frame),
            TrackingStatus::Tracking => self.track(frame),
            TrackingStatus::Lost => self.recover(frame),
        };
        match status {
            FrameStatus::Lost => self.stats.lost += 1,
            FrameStatus::Tracked | FrameStatus::TrackedKeyFrame | FrameStatus::Relocalized | FrameStatus::Initialized => {
                self.stats.tracked += 1
            }
            FrameStatus::Initializing => {}
        }
        Ok(status)
    }

    fn th(&self) -> MatchThresholds {
        self.thresholds.unwrap_or_else(MatchThresholds::binary_default)
    }

    fn record(&mut self, frame: &Frame, reference: KeyFrameId) {
        let Some(kf) = self.map.keyframe(reference) else { return };
        self.records.push(FrameRecord {
            frame_id: frame.id,
            timestamp: frame.timestamp,
            reference,
            relative: frame.pose.compose(&kf.pose.inverse()),
        });
    }

    fn initialize(&mut self, mut frame: Frame) -> FrameStatus {
        let Some(mut first) = self.init_frame.take() else {
            self.init_frame = Some(frame);
            return FrameStatus::Initializing;
        };
        self.stats.init_attempts += 1;
        let th = self.th();
        let vocab = self.vocab.clone();
        let result = initialize_map(
            &mut self.map,
            &mut first,
            &mut frame,
            &self.intrinsics,
            &th,
            &self.config.tracking,
            vocab.as_deref(),
            Some(&mut self.db),
            self.seed,
        );
        match result {
            Ok(report) => {
                let (k1, k2) = report.keyframes;
                self.record(&first, k1);
                self.record(&frame, k2);
                self.recent_points = report.points;
                if frame.id == first.id + 1 {
                    self.velocity.update(&first.pose, &frame.pose);
                }
                self.state = TrackingState {
                    status: TrackingStatus::Tracking,
                    reference_keyframe: Some(k2),
                    inlier_count: frame.tracked_count(),
                    frames_since_keyframe: 0,
                };
                self.last_frame = Some(frame);
                FrameStatus::Initialized
            }
            Err(e) => {
                self.map = Map::new(self.config.mapping);
                self.db = KeyFrameDatabase::new();
                let replace = matches!(e, InitError::InsufficientMatches(_))
                    || frame.id.saturating_sub(first.id) as usize > self.config.init_patience;
                self.init_frame = Some(if replace { frame } else { first });
                FrameStatus::Initializing
            }
        }
    }

    fn track(&mut self, mut frame: Frame) -> FrameStatus {
        let last = self.last_frame.as_ref().expect("tracking implies a previous frame");
        let predicted = predict_pose(&last.pose, &self.velocity);
        let seen: Vec<MapPointId> = last.map_points.iter().flatten().copied().collect();
        let reference = self.state.reference_keyframe.unwrap_or(KeyFrameId(0));
        let th = self.th();
        match track_frame(&mut frame, &self.map, reference, predicted, &seen, &self.intrinsics, &th, &self.config.tracking) {
            Ok(outcome) => {
                for p in &outcome.visible {
                    if let Some(mp) = self.map.point_mut(*p) {
                        mp.visible += 1;
                    }
                }
                for (_, p) in &outcome.matches {
                    if let Some(mp) = self.map.point_mut(*p) {
                        mp.found += 1;
                    }
                }
                self.after_pose(frame, outcome.inliers)
            }
            Err(_) => {
                self.state.status = TrackingStatus::Lost;
                self.state.inlier_count = 0;
                FrameStatus::Lost
            }
        }
    }

    fn recover(&mut self, mut frame: Frame) -> FrameStatus {
        let Some(vocab) = self.vocab.clone() else { return FrameStatus::Lost };
        let th = self.th();
        let Some(reloc) = relocalize(&self.map, &self.db, &vocab, &frame, &self.intrinsics, &th, self.seed ^ frame.id) else {
            return FrameStatus::Lost;
        };
        frame.pose = reloc.pose;
        frame.map_points.iter_mut().for_each(|m| *m = None);
        for (i, p) in &reloc.matches {
            frame.map_points[*i] = Some(*p);
        }
        self.velocity = VelocityModel::default();
        self.state.reference_keyframe = Some(reloc.keyframe);
        self.state.status = TrackingStatus::Tracking;
        self.stats.relocalizations += 1;
        self.after_pose(frame, reloc.matches.len());
        FrameStatus::Relocalized
    }

    fn after_pose(&mut self, mut frame: Frame, inliers: usize) -> FrameStatus {
        if let Some(last) = &self.last_frame {
            self.velocity.update(&last.pose, &frame.pose);
        }
        // the keyframe sharing most points becomes the reference
        let mut votes: BTreeMap<KeyFrameId, usize> = BTreeMap::new();
        for p in frame.map_points.iter().flatten() {
            if let Some(mp) = self.map.point(*p) {
                for k in mp.observations.keys() {
                    *votes.entry(*k).or_default() += 1;
                }
            }
        }
        if let Some((best, _)) = votes.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))) {
            self.state.reference_keyframe = Some(*best);
        }
        self.state.status = TrackingStatus::Tracking;
        self.state.inlier_count = inliers;
        self.state.frames_since_keyframe += 1;
        let idle = self.pending_loop.is_none();
        let status = if need_keyframe(&self.state, &frame, &self.map, idle, &self.config.tracking) {
            let kf = self.insert_keyframe(&mut frame);
            self.state.reference_keyframe = Some(kf);
            self.state.frames_since_keyframe = 0;
            FrameStatus::TrackedKeyFrame
        } else {
            FrameStatus::Tracked
        };
        let reference = self.state.reference_keyframe.expect("set above");
        self.record(&frame, reference);
        self.last_frame = Some(frame);
        status
    }

    /// Inserts the frame as a keyframe and runs the local mapping steps.
    fn insert_keyframe(&mut self, frame: &mut Frame) -> KeyFrameId {
        let th = self.th();
        let k = self.intrinsics;
        let vocab = self.vocab.clone();
        let kf = insert_keyframe(&mut self.map, frame, vocab.as_deref(), Some(&mut self.db));
        self.stats.keyframes_inserted += 1;
        cull_map_points(&mut self.map, &mut self.recent_points);
        let created = create_map_points(&mut self.map, kf, &k, &th);
        self.recent_points.extend(created);
        fuse(&mut self.map, kf, &k, &th);
        let report = local_bundle_adjustment(&mut self.map, kf, &k);
        if report.optimized_keyframes > 0 {
            self.stats.local_ba_runs += 1;
            if !(report.first.is_monotone() && report.second.is_monotone()) {
                self.stats.non_monotone_ba += 1;
            }
        }
        let protected: BTreeSet<KeyFrameId> = self.state.reference_keyframe.into_iter().chain([kf]).collect();
        for removed in cull_keyframes(&mut self.map, kf, &protected) {
            self.db.erase(removed);
        }
        // the frame continues with the keyframe's associations, including new points
        if let Some(k) = self.map.keyframe(kf) {
            frame.pose = k.pose;
            frame.map_points = k.points.clone();
        }
        self.launch_loop_detection(kf);
        kf
    }

    fn launch_loop_detection(&mut self, kf: KeyFrameId) {
        let Some(detector) = self.detector.take() else { return };
        let th = self.th();
        let k = self.intrinsics;
        let seed = self.seed;
        match self.config.loop_mode {
            LoopMode::Off => self.detector = Some(detector),
            LoopMode::Inline => {
                let (det, found) = detect_loop(detector, &self.map, &self.db, kf, &k, &th, seed);
                self.detector = Some(det);
                if let Some(lt) = found {
                    self.apply_loop(lt);
                }
            }
            LoopMode::Background => {
                let map = self.map.clone();
                let db = self.db.clone();
                self.pending_loop = Some(std::thread::spawn(move || detect_loop(detector, &map, &db, kf, &k, &th, seed)));
            }
        }
    }

    /// Waits for background loop detection and applies any closure it found.
    fn join_loop(&mut self) {
        let Some(job) = self.pending_loop.take() else { return };
        let (det, found) = job.join().expect("loop detection worker panicked");
        self.detector = Some(det);
        if let Some(lt) = found {
            self.apply_loop(lt);
        }
    }

    fn apply_loop(&mut self, lt: LoopTransform) {
        let th = self.th();
        let before = self.last_frame.as_ref().and_then(|f| {
            let r = self.state.reference_keyframe?;
            Some((r, f.pose.compose(&self.map.keyframe(r)?.pose.inverse())))
        });
        let cfg = self.config.loops;
        let Some(correction) = correct_loop(&mut self.map, &lt, &self.intrinsics, &th, &cfg) else { return };
        if let Some(d) = self.detector.as_mut() {
            d.mark_closed(self.map.insertions());
        }
        // keep the last frame attached to its corrected reference
        if let (Some((r, rel)), Some(f)) = (before, self.last_frame.as_mut()) {
            if let Some(p) = self.map.resolve_pose(r) {
                f.pose = rel.compose(&p);
            }
        }
        self.stats.loop_corrections.push(correction);
    }

    /// Joins outstanding work; call once after the last frame.
    pub fn finish(&mut self) {
        self.join_loop();
    }

    /// Estimated trajectory of every tracked frame, resolved through its reference
    /// keyframe so map corrections are reflected.
    pub fn trajectory(&self) -> Trajectory {
        let entries: Vec<TrajectoryEntry> = self
            .records
            .iter()
            .filter_map(|r| {
                let reference = self.map.resolve_pose(r.reference)?;
                Some(TrajectoryEntry {
                    timestamp: r.timestamp,
                    pose: r.relative.compose(&reference),
                    frame_id: r.frame_id,
                })
            })
            .collect();
        Trajectory::new(entries).unwrap_or_default()
    }

    pub fn is_initialized(&self) -> bool {
        !self.records.is_empty()
    }
}

impl Drop for System {
    fn drop(&mut self) {
        if let Some(job) = self.pending_loop.take() {
            let _ = job.join();
        }
    }
}
