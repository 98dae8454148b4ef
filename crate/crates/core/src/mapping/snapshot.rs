//! Versioned binary dump of a map.
//!
//! Layout, little-endian:
//! `FSLM` magic, `u32` version, `u32` keyframe count, `u32` point count, then per keyframe
//! `u64 id, u64 frame_id, f64 timestamp, 12 x f64 world-to-camera [R|t] row-major,
//! i64 parent (-1 for none), u32 edge count, (u64 neighbour, u32 weight)*`, then per point
//! `u64 id, 3 x f64 position, u32 observation count, (u64 keyframe, u32 keypoint index)*`.

use std::io;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::{KeyFrameId, Map, MapPointId};
use crate::geometry::Pose;

pub const MAP_MAGIC: &[u8; 4] = b"FSLM";
pub const MAP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct KeyFrameRecord {
    pub id: KeyFrameId,
    pub frame_id: u64,
    pub timestamp: f64,
    pub pose: Pose,
    pub parent: Option<KeyFrameId>,
    pub edges: Vec<(KeyFrameId, u32)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointRecord {
    pub id: MapPointId,
    pub position: Vector3<f64>,
    pub observations: Vec<(KeyFrameId, u32)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MapSnapshot {
    pub keyframes: Vec<KeyFrameRecord>,
    pub points: Vec<PointRecord>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N], String> {
        let end = self.pos + N;
        let s = self.buf.get(self.pos..end).ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        self.pos = end;
        Ok(s.try_into().unwrap())
    }
    fn u32(&mut self) -> Result<u32, String> {
        self.take::<4>().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64, String> {
        self.take::<8>().map(u64::from_le_bytes)
    }
    fn i64(&mut self) -> Result<i64, String> {
        self.take::<8>().map(i64::from_le_bytes)
    }
    fn f64(&mut self) -> Result<f64, String> {
        self.take::<8>().map(f64::from_le_bytes)
    }
}

impl MapSnapshot {
    pub fn capture(map: &Map) -> Self {
        let keyframes = map
            .keyframes()
            .values()
            .map(|k| KeyFrameRecord {
                id: k.id,
                frame_id: k.frame_id,
                timestamp: k.timestamp,
                pose: k.pose,
                parent: k.parent,
                edges: k.covisibility.iter().map(|(n, w)| (*n, *w as u32)).collect(),
            })
            .collect();
        let points = map
            .points()
            .values()
            .map(|p| PointRecord {
                id: p.id,
                position: p.position.position,
                observations: p.observations.iter().map(|(k, i)| (*k, *i as u32)).collect(),
            })
            .collect();
        Self { keyframes, points }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAP_MAGIC);
        out.extend_from_slice(&MAP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.keyframes.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for k in &self.keyframes {
            out.extend_from_slice(&k.id.0.to_le_bytes());
            out.extend_from_slice(&k.frame_id.to_le_bytes());
            out.extend_from_slice(&k.timestamp.to_le_bytes());
            let (r, t) = (k.pose.rotation(), k.pose.translation());
            for row in 0..3 {
                for col in 0..3 {
                    out.extend_from_slice(&r[(row, col)].to_le_bytes());
                }
                out.extend_from_slice(&t[row].to_le_bytes());
            }
            let parent = k.parent.map_or(-1i64, |p| p.0 as i64);
            out.extend_from_slice(&parent.to_le_bytes());
            out.extend_from_slice(&(k.edges.len() as u32).to_le_bytes());
            for (n, w) in &k.edges {
                out.extend_from_slice(&n.0.to_le_bytes());
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        for p in &self.points {
            out.extend_from_slice(&p.id.0.to_le_bytes());
            for v in p.position.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(p.observations.len() as u32).to_le_bytes());
            for (k, i) in &p.observations {
                out.extend_from_slice(&k.0.to_le_bytes());
                out.extend_from_slice(&i.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, String> {
        let mut r = Reader { buf, pos: 0 };
        if &r.take::<4>()? != MAP_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != MAP_VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let (nk, np) = (r.u32()?, r.u32()?);
        let mut snap = Self::default();
        for _ in 0..nk {
            let id = KeyFrameId(r.u64()?);
            let frame_id = r.u64()?;
            let timestamp = r.f64()?;
            let mut rot = Matrix3::zeros();
            let mut t = Vector3::zeros();
            for row in 0..3 {
                for col in 0..3 {
                    rot[(row, col)] = r.f64()?;
                }
                t[row] = r.f64()?;
            }
            let pose = Pose::new(rot, t).map_err(|e| e.to_string())?;
            let parent = match r.i64()? {
                -1 => None,
                p if p >= 0 => Some(KeyFrameId(p as u64)),
                p => return Err(format!("invalid parent {p}")),
            };
            let ne = r.u32()?;
            let mut edges = Vec::with_capacity(ne as usize);
            for _ in 0..ne {
                edges.push((KeyFrameId(r.u64()?), r.u32()?));
            }
            snap.keyframes.push(KeyFrameRecord {
                id,
                frame_id,
                timestamp,
                pose,
                parent,
                edges,
            });
        }
        for _ in 0..np {
            let id = MapPointId(r.u64()?);
            let position = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
            let no = r.u32()?;
            let mut observations = Vec::with_capacity(no as usize);
            for _ in 0..no {
                observations.push((KeyFrameId(r.u64()?), r.u32()?));
            }
            snap.points.push(PointRecord { id, position, observations });
        }
        if r.pos != buf.len() {
            return Err(format!("{} trailing bytes", buf.len() - r.pos));
        }
        Ok(snap)
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_bytes())
    }
}
