//! Keyframes, map points and the covisibility graph, plus the local mapping steps run
//! after every keyframe insertion.

mod local;
mod snapshot;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::features::{representative_index, Descriptor, Keypoint};
use crate::geometry::{CameraIntrinsics, Landmark, Pose};
use crate::place_recognition::{BowVector, FeatureVector, KeyFrameDatabase, Vocabulary};

pub use local::{
    create_map_points, cull_keyframes, cull_map_points, fuse, local_bundle_adjustment, LocalBaReport,
};
pub(crate) use local::fuse_into;
pub use snapshot::{KeyFrameRecord, MapSnapshot, PointRecord, MAP_MAGIC, MAP_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct KeyFrameId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MapPointId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MappingConfig {
    /// Minimum shared map points for a covisibility edge.
    pub covisibility_min: usize,
    /// Neighbours searched for new map points.
    pub triangulation_neighbors: usize,
    pub min_parallax_deg: f64,
    pub epipolar_chi2: f64,
    pub reprojection_chi2: f64,
    /// Keyframes after creation during which a new point must gain observations.
    pub point_window: usize,
    pub min_point_observers: usize,
    pub min_found_ratio: f64,
    /// Fraction of a keyframe's points that must be redundant for it to be culled.
    pub redundancy: f64,
    pub redundant_observers: usize,
    pub ba_first_iterations: usize,
    pub ba_second_iterations: usize,
    /// Search radius in pixels when fusing duplicate points.
    pub fuse_radius: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            covisibility_min: 15,
            triangulation_neighbors: 10,
            min_parallax_deg: 1.0,
            epipolar_chi2: crate::optim::CHI2_1DOF,
            reprojection_chi2: crate::optim::CHI2_2DOF,
            point_window: 3,
            min_point_observers: 2,
            min_found_ratio: 0.25,
            redundancy: 0.9,
            redundant_observers: 3,
            ba_first_iterations: 5,
            ba_second_iterations: 10,
            fuse_radius: 3.0,
        }
    }
}

/// Fixed-cell bucket index over keypoint positions for radius queries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureGrid {
    cell: f64,
    cols: usize,
    rows: usize,
    cells: Vec<Vec<usize>>,
}

const GRID_CELL_PX: f64 = 16.0;

impl FeatureGrid {
    pub fn new(keypoints: &[Keypoint], width: u32, height: u32) -> Self {
        let cols = ((width as f64 / GRID_CELL_PX).ceil() as usize).max(1);
        let rows = ((height as f64 / GRID_CELL_PX).ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); cols * rows];
        for (i, k) in keypoints.iter().enumerate() {
            let cx = ((k.x / GRID_CELL_PX).floor().max(0.0) as usize).min(cols - 1);
            let cy = ((k.y / GRID_CELL_PX).floor().max(0.0) as usize).min(rows - 1);
            cells[cy * cols + cx].push(i);
        }
        Self {
            cell: GRID_CELL_PX,
            cols,
            rows,
            cells,
        }
    }

    /// Indices of keypoints within `radius` of `(x, y)`, ascending.
    pub fn within(&self, keypoints: &[Keypoint], x: f64, y: f64, radius: f64) -> Vec<usize> {
        if self.cells.is_empty() {
            return Vec::new();
        }
        let clamp = |v: f64, n: usize| ((v / self.cell).floor().max(0.0) as usize).min(n - 1);
        let (x0, x1) = (clamp(x - radius, self.cols), clamp(x + radius, self.cols));
        let (y0, y1) = (clamp(y - radius, self.rows), clamp(y + radius, self.rows));
        let r2 = radius * radius;
        let mut out = Vec::new();
        for cy in y0..=y1 {
            for cx in x0..=x1 {
                for &i in &self.cells[cy * self.cols + cx] {
                    let k = &keypoints[i];
                    if (k.x - x).powi(2) + (k.y - y).powi(2) <= r2 {
                        out.push(i);
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// A processed camera frame.
#[derive(Clone, Debug)]
pub struct Frame {
    pub id: u64,
    pub timestamp: f64,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    pub pose: Pose,
    pub is_keyframe: bool,
    /// Map point associated with each keypoint.
    pub map_points: Vec<Option<MapPointId>>,
    pub grid: FeatureGrid,
}

impl Frame {
    pub fn new(
        id: u64,
        timestamp: f64,
        keypoints: Vec<Keypoint>,
        descriptors: Vec<Descriptor>,
        k: &CameraIntrinsics,
    ) -> Result<Self, crate::features::FeatureError> {
        crate::features::validate_frame_features(&keypoints, &descriptors)?;
        let grid = FeatureGrid::new(&keypoints, k.width, k.height);
        Ok(Self {
            id,
            timestamp,
            map_points: vec![None; keypoints.len()],
            keypoints,
            descriptors,
            pose: Pose::identity(),
            is_keyframe: false,
            grid,
        })
    }

    pub fn tracked_count(&self) -> usize {
        self.map_points.iter().flatten().count()
    }
}

#[derive(Clone, Debug)]
pub struct KeyFrame {
    pub id: KeyFrameId,
    pub frame_id: u64,
    pub timestamp: f64,
    pub keypoints: Vec<Keypoint>,
    pub descriptors: Vec<Descriptor>,
    pub pose: Pose,
    pub points: Vec<Option<MapPointId>>,
    pub grid: FeatureGrid,
    pub bow: BowVector,
    pub features: FeatureVector,
    /// Neighbour keyframe -> shared map point count.
    pub covisibility: BTreeMap<KeyFrameId, usize>,
    pub parent: Option<KeyFrameId>,
    pub children: BTreeSet<KeyFrameId>,
    pub loop_edges: BTreeSet<KeyFrameId>,
}

impl KeyFrame {
    pub fn point_count(&self) -> usize {
        self.points.iter().flatten().count()
    }

    /// Neighbours by descending weight, ties by ascending id.
    pub fn best_covisible(&self, n: usize) -> Vec<KeyFrameId> {
        let mut v: Vec<(KeyFrameId, usize)> = self.covisibility.iter().map(|(k, w)| (*k, *w)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.into_iter().take(n).map(|(k, _)| k).collect()
    }

    pub fn inv_sigma2(&self, idx: usize) -> f64 {
        1.0 / self.keypoints[idx].scale.powi(2)
    }
}

#[derive(Clone, Debug)]
pub struct MapPoint {
    pub id: MapPointId,
    pub position: Landmark,
    pub observations: BTreeMap<KeyFrameId, usize>,
    pub descriptor: Descriptor,
    pub normal: Vector3<f64>,
    pub found: u32,
    pub visible: u32,
    /// Keyframe whose pose anchors this point during loop correction.
    pub reference: KeyFrameId,
    /// Keyframe insertion count when the point was created.
    pub created_at: usize,
}

impl MapPoint {
    pub fn found_ratio(&self) -> f64 {
        if self.visible == 0 {
            1.0
        } else {
            self.found as f64 / self.visible as f64
        }
    }
}

/// Pose of a removed keyframe relative to its spanning-tree parent, kept so frames that
/// referenced it still resolve to a pose.
#[derive(Clone, Copy, Debug)]
pub struct CulledKeyFrame {
    pub parent: KeyFrameId,
    pub relative: Pose,
}

/// The map: keyframes, map points and the covisibility graph over them.
#[derive(Clone, Debug, Default)]
pub struct Map {
    keyframes: BTreeMap<KeyFrameId, KeyFrame>,
    points: BTreeMap<MapPointId, MapPoint>,
    culled: BTreeMap<KeyFrameId, CulledKeyFrame>,
    next_keyframe: u64,
    next_point: u64,
    inserted: usize,
    pub config: MappingConfig,
}

/// Alias naming the graph view of the map.
pub type CovisibilityGraph = Map;

impl Map {
    pub fn new(config: MappingConfig) -> Self {
        Self {
            config,
            ..Default::default()
        }
    }

    pub fn keyframes(&self) -> &BTreeMap<KeyFrameId, KeyFrame> {
        &self.keyframes
    }

    pub fn points(&self) -> &BTreeMap<MapPointId, MapPoint> {
        &self.points
    }

    pub fn keyframe(&self, id: KeyFrameId) -> Option<&KeyFrame> {
        self.keyframes.get(&id)
    }

    pub fn keyframe_mut(&mut self, id: KeyFrameId) -> Option<&mut KeyFrame> {
        self.keyframes.get_mut(&id)
    }

    pub fn point(&self, id: MapPointId) -> Option<&MapPoint> {
        self.points.get(&id)
    }

    pub fn point_mut(&mut self, id: MapPointId) -> Option<&mut MapPoint> {
        self.points.get_mut(&id)
    }

    pub fn keyframe_count(&self) -> usize {
        self.keyframes.len()
    }

    pub fn point_count(&self) -> usize {
        self.points.len()
    }

    /// Number of keyframes inserted so far, including culled ones.
    pub fn insertions(&self) -> usize {
        self.inserted
    }

    pub fn origin(&self) -> Option<KeyFrameId> {
        self.keyframes.keys().next().copied()
    }

    pub fn culled(&self) -> &BTreeMap<KeyFrameId, CulledKeyFrame> {
        &self.culled
    }

    /// Current world-to-camera pose of a keyframe, following culled keyframes through the
    /// spanning tree.
    pub fn resolve_pose(&self, id: KeyFrameId) -> Option<Pose> {
        let mut chain = Pose::identity();
        let mut cur = id;
        for _ in 0..=self.culled.len() {
            if let Some(kf) = self.keyframes.get(&cur) {
                return Some(chain.compose(&kf.pose));
            }
            let c = self.culled.get(&cur)?;
            chain = chain.compose(&c.relative);
            cur = c.parent;
        }
        None
    }

    /// Adds a keyframe built from `frame`, without touching the graph.
    pub(crate) fn push_keyframe(&mut self, frame: &Frame) -> KeyFrameId {
        let id = KeyFrameId(self.next_keyframe);
        self.next_keyframe += 1;
        self.inserted += 1;
        self.keyframes.insert(
            id,
            KeyFrame {
                id,
                frame_id: frame.id,
                timestamp: frame.timestamp,
                keypoints: frame.keypoints.clone(),
                descriptors: frame.descriptors.clone(),
                pose: frame.pose,
                points: vec![None; frame.keypoints.len()],
                grid: frame.grid.clone(),
                bow: BowVector::default(),
                features: FeatureVector::default(),
                covisibility: BTreeMap::new(),
                parent: None,
                children: BTreeSet::new(),
                loop_edges: BTreeSet::new(),
            },
        );
        id
    }

    /// Creates a map point with a single observation.
    pub fn add_point(&mut self, position: Vector3<f64>, kf: KeyFrameId, idx: usize) -> Option<MapPointId> {
        let landmark = Landmark::new(position).ok()?;
        let k = self.keyframes.get_mut(&kf)?;
        if k.points[idx].is_some() {
            return None;
        }
        let id = MapPointId(self.next_point);
        self.next_point += 1;
        k.points[idx] = Some(id);
        let descriptor = k.descriptors[idx].clone();
        let normal = (position - k.pose.center()).normalize();
        self.points.insert(
            id,
            MapPoint {
                id,
                position: landmark,
                observations: BTreeMap::from([(kf, idx)]),
                descriptor,
                normal,
                found: 1,
                visible: 1,
                reference: kf,
                created_at: self.inserted,
            },
        );
        Some(id)
    }

    /// Records that keypoint `idx` of `kf` observes `point`. Fails when either side is
    /// already taken.
    pub fn add_observation(&mut self, point: MapPointId, kf: KeyFrameId, idx: usize) -> bool {
        let Some(p) = self.points.get(&point) else { return false };
        if p.observations.contains_key(&kf) {
            return false;
        }
        let Some(k) = self.keyframes.get_mut(&kf) else { return false };
        if idx >= k.points.len() || k.points[idx].is_some() {
            return false;
        }
        k.points[idx] = Some(point);
        self.points.get_mut(&point).unwrap().observations.insert(kf, idx);
        true
    }

    /// Removes one observation; the point is deleted when none remain.
    pub fn erase_observation(&mut self, point: MapPointId, kf: KeyFrameId) {
        let Some(p) = self.points.get_mut(&point) else { return };
        if let Some(idx) = p.observations.remove(&kf) {
            if let Some(k) = self.keyframes.get_mut(&kf) {
                if k.points[idx] == Some(point) {
                    k.points[idx] = None;
                }
            }
        }
        if p.observations.is_empty() {
            self.points.remove(&point);
        } else if p.reference == kf {
            p.reference = *p.observations.keys().next().unwrap();
        }
    }

    pub fn erase_point(&mut self, point: MapPointId) {
        if let Some(p) = self.points.remove(&point) {
            for (kf, idx) in p.observations {
                if let Some(k) = self.keyframes.get_mut(&kf) {
                    if k.points[idx] == Some(point) {
                        k.points[idx] = None;
                    }
                }
            }
        }
    }

    /// Merges `old` into `keep`: observations move over unless the keyframe already sees
    /// `keep`; `old` is deleted.
    pub fn replace_point(&mut self, old: MapPointId, keep: MapPointId) {
        if old == keep {
            return;
        }
        let Some(p) = self.points.remove(&old) else { return };
        if !self.points.contains_key(&keep) {
            self.points.insert(old, p);
            return;
        }
        for (kf, idx) in p.observations {
            let Some(k) = self.keyframes.get_mut(&kf) else { continue };
            if k.points[idx] == Some(old) {
                k.points[idx] = None;
            }
            if !self.points[&keep].observations.contains_key(&kf) {
                k.points[idx] = Some(keep);
                self.points.get_mut(&keep).unwrap().observations.insert(kf, idx);
            }
        }
        let kp = self.points.get_mut(&keep).unwrap();
        kp.found += p.found;
        kp.visible += p.visible;
        self.update_point_descriptor(keep);
        self.update_point_normal(keep);
    }

    /// Chooses the observation descriptor with the smallest median distance to the others.
    pub fn update_point_descriptor(&mut self, point: MapPointId) {
        let Some(p) = self.points.get(&point) else { return };
        let descs: Vec<&Descriptor> = p
            .observations
            .iter()
            .filter_map(|(kf, idx)| self.keyframes.get(kf).map(|k| &k.descriptors[*idx]))
            .collect();
        if let Some(best) = representative_index(&descs) {
            let d = descs[best].clone();
            self.points.get_mut(&point).unwrap().descriptor = d;
        }
    }

    /// Mean viewing direction over the observing keyframes.
    pub fn update_point_normal(&mut self, point: MapPointId) {
        let Some(p) = self.points.get(&point) else { return };
        let mut n = Vector3::zeros();
        for kf in p.observations.keys() {
            if let Some(k) = self.keyframes.get(kf) {
                n += (p.position.position - k.pose.center()).normalize();
            }
        }
        if n.norm() > 0.0 {
            self.points.get_mut(&point).unwrap().normal = n.normalize();
        }
    }

    pub fn set_point_position(&mut self, point: MapPointId, x: Vector3<f64>) {
        if let (Some(p), Ok(l)) = (self.points.get_mut(&point), Landmark::new(x)) {
            p.position = l;
        }
    }

    pub fn set_keyframe_pose(&mut self, kf: KeyFrameId, pose: Pose) {
        if let Some(k) = self.keyframes.get_mut(&kf) {
            k.pose = pose;
        }
    }

    /// Shared map point counts between `kf` and every other keyframe.
    pub fn shared_counts(&self, kf: KeyFrameId) -> BTreeMap<KeyFrameId, usize> {
        let mut counts = BTreeMap::new();
        if let Some(k) = self.keyframes.get(&kf) {
            for pid in k.points.iter().flatten() {
                if let Some(p) = self.points.get(pid) {
                    for other in p.observations.keys() {
                        if *other != kf {
                            *counts.entry(*other).or_insert(0) += 1;
                        }
                    }
                }
            }
        }
        counts
    }

    /// Recomputes the covisibility edges of `kf` (both directions) and, for a keyframe
    /// without one, picks its spanning-tree parent.
    pub fn update_connections(&mut self, kf: KeyFrameId) {
        let counts = self.shared_counts(kf);
        let min = self.config.covisibility_min;
        let old: Vec<KeyFrameId> = self.keyframes[&kf].covisibility.keys().copied().collect();
        for o in old {
            if let Some(k) = self.keyframes.get_mut(&o) {
                k.covisibility.remove(&kf);
            }
        }
        let edges: BTreeMap<KeyFrameId, usize> = counts.iter().filter(|(_, &w)| w >= min).map(|(k, w)| (*k, *w)).collect();
        for (o, w) in &edges {
            self.keyframes.get_mut(o).unwrap().covisibility.insert(kf, *w);
        }
        self.keyframes.get_mut(&kf).unwrap().covisibility = edges;

        if self.keyframes[&kf].parent.is_none() && Some(kf) != self.origin() {
            let best = counts
                .iter()
                .filter(|(o, _)| **o < kf)
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(o, _)| *o)
                .or_else(|| self.keyframes.range(..kf).next_back().map(|(o, _)| *o));
            if let Some(parent) = best {
                self.keyframes.get_mut(&kf).unwrap().parent = Some(parent);
                self.keyframes.get_mut(&parent).unwrap().children.insert(kf);
            }
        }
    }

    /// Every keyframe covisible with `kf` (all weights), plus `kf` itself.
    pub fn connected_group(&self, kf: KeyFrameId) -> BTreeSet<KeyFrameId> {
        let mut g: BTreeSet<KeyFrameId> = self
            .keyframes
            .get(&kf)
            .map(|k| k.covisibility.keys().copied().collect())
            .unwrap_or_default();
        g.insert(kf);
        g
    }

    /// Removes a keyframe from the map, keeping the spanning tree connected by moving its
    /// children to its parent.
    pub fn remove_keyframe(&mut self, kf: KeyFrameId) -> bool {
        if Some(kf) == self.origin() || !self.keyframes.contains_key(&kf) {
            return false;
        }
        let Some(parent) = self.keyframes[&kf].parent else { return false };
        let k = self.keyframes.get(&kf).unwrap();
        let pts: Vec<MapPointId> = k.points.iter().flatten().copied().collect();
        let neighbors: Vec<KeyFrameId> = k.covisibility.keys().copied().collect();
        let children: Vec<KeyFrameId> = k.children.iter().copied().collect();
        let relative = k.pose.compose(&self.keyframes[&parent].pose.inverse());
        for p in pts {
            self.erase_observation(p, kf);
        }
        for n in &neighbors {
            if let Some(nk) = self.keyframes.get_mut(n) {
                nk.covisibility.remove(&kf);
            }
        }
        for c in &children {
            self.keyframes.get_mut(c).unwrap().parent = Some(parent);
            self.keyframes.get_mut(&parent).unwrap().children.insert(*c);
        }
        let pk = self.keyframes.get_mut(&parent).unwrap();
        pk.children.remove(&kf);
        let loops: Vec<KeyFrameId> = self.keyframes[&kf].loop_edges.iter().copied().collect();
        for l in loops {
            if let Some(lk) = self.keyframes.get_mut(&l) {
                lk.loop_edges.remove(&kf);
            }
        }
        self.keyframes.remove(&kf);
        self.culled.insert(kf, CulledKeyFrame { parent, relative });
        for n in neighbors {
            if self.keyframes.contains_key(&n) {
                self.update_connections(n);
            }
        }
        true
    }

    /// Checks referential integrity, covisibility symmetry and exact weights, and the
    /// spanning tree. Returns a description of the first violation.
    pub fn check_integrity(&self) -> Result<(), String> {
        for (pid, p) in &self.points {
            if p.observations.is_empty() {
                return Err(format!("{pid:?} has no observations"));
            }
            for (kf, idx) in &p.observations {
                let k = self.keyframes.get(kf).ok_or(format!("{pid:?} observed by dead {kf:?}"))?;
                if k.points.get(*idx) != Some(&Some(*pid)) {
                    return Err(format!("{kf:?}[{idx}] does not point back to {pid:?}"));
                }
            }
        }
        for (kid, k) in &self.keyframes {
            for (idx, pid) in k.points.iter().enumerate() {
                if let Some(pid) = pid {
                    let p = self.points.get(pid).ok_or(format!("{kid:?} refers to dead {pid:?}"))?;
                    if p.observations.get(kid) != Some(&idx) {
                        return Err(format!("{pid:?} lacks observation {kid:?}[{idx}]"));
                    }
                }
            }
            let truth = self.shared_counts(*kid);
            for (o, w) in &k.covisibility {
                if truth.get(o) != Some(w) {
                    return Err(format!("edge {kid:?}-{o:?} weight {w} vs {:?}", truth.get(o)));
                }
                if *w < self.config.covisibility_min {
                    return Err(format!("edge {kid:?}-{o:?} below minimum"));
                }
                if self.keyframes.get(o).and_then(|ok| ok.covisibility.get(kid)) != Some(w) {
                    return Err(format!("edge {kid:?}-{o:?} not symmetric"));
                }
            }
            // walk to the root
            let mut cur = *kid;
            let mut steps = 0;
            while Some(cur) != self.origin() {
                let parent = self.keyframes[&cur].parent.ok_or(format!("{cur:?} has no parent"))?;
                let pk = self.keyframes.get(&parent).ok_or(format!("{cur:?} has dead parent {parent:?}"))?;
                if !pk.children.contains(&cur) {
                    return Err(format!("{parent:?} does not list child {cur:?}"));
                }
                cur = parent;
                steps += 1;
                if steps > self.keyframes.len() {
                    return Err("spanning tree has a cycle".into());
                }
            }
        }
        Ok(())
    }

    /// Map points observed by any of `kfs`, ascending.
    pub fn points_of(&self, kfs: &BTreeSet<KeyFrameId>) -> BTreeSet<MapPointId> {
        kfs.iter()
            .filter_map(|k| self.keyframes.get(k))
            .flat_map(|k| k.points.iter().flatten().copied())
            .collect()
    }

    /// Pixel position of keypoint `idx` in `kf`.
    pub fn observation(&self, kf: KeyFrameId, idx: usize) -> Option<Vector2<f64>> {
        self.keyframes.get(&kf).map(|k| k.keypoints[idx].position())
    }
}

/// Inserts `frame` as a keyframe: registers its tracked map points, computes its BoW
/// signature and database entry, and connects it in the covisibility graph.
pub fn insert_keyframe(
    map: &mut Map,
    frame: &Frame,
    vocab: Option<&Vocabulary>,
    db: Option<&mut KeyFrameDatabase>,
) -> KeyFrameId {
    let id = map.push_keyframe(frame);
    for (idx, mp) in frame.map_points.iter().enumerate() {
        if let Some(p) = mp {
            if map.add_observation(*p, id, idx) {
                map.update_point_normal(*p);
                map.update_point_descriptor(*p);
            }
        }
    }
    if let Some(v) = vocab {
        if let Ok((bow, fv)) = v.transform(&frame.descriptors) {
            if let Some(db) = db {
                db.add(id, &bow);
            }
            let k = map.keyframe_mut(id).unwrap();
            k.bow = bow;
            k.features = fv;
        }
    }
    map.update_connections(id);
    id
}
