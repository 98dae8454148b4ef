use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use super::EvalError;
use crate::geometry::{orthonormalize, Pose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryEntry {
    pub timestamp: f64,
    /// World-to-camera pose.
    pub pose: Pose,
    pub frame_id: u64,
}

/// Time-ordered pose sequence with strictly increasing timestamps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    entries: Vec<TrajectoryEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrajectoryFormat {
    /// 12 numbers per line: row-major 3x4 camera-to-world matrix.
    Kitti,
    /// `timestamp tx ty tz qx qy qz qw`, camera-to-world.
    Tum,
}

impl Trajectory {
    pub fn new(entries: Vec<TrajectoryEntry>) -> Result<Self, EvalError> {
        for w in entries.windows(2) {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(EvalError::NonIncreasingTimestamps(w[1].timestamp));
            }
        }
        Ok(Self { entries })
    }

    /// Entries with timestamps equal to their index.
    pub fn from_poses(poses: impl IntoIterator<Item = Pose>) -> Self {
        let entries = poses
            .into_iter()
            .enumerate()
            .map(|(i, pose)| TrajectoryEntry {
                timestamp: i as f64,
                pose,
                frame_id: i as u64,
            })
            .collect();
        Self { entries }
    }

    pub fn entries(&self) -> &[TrajectoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|e| e.pose.center()).collect()
    }

    /// Returns a copy with `f` applied to every pose.
    pub fn map_poses(&self, f: impl Fn(&Pose) -> Pose) -> Trajectory {
        Trajectory {
            entries: self
                .entries
                .iter()
                .map(|e| TrajectoryEntry {
                    pose: f(&e.pose),
                    ..*e
                })
                .collect(),
        }
    }

    pub fn to_text(&self, format: TrajectoryFormat) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let twc = e.pose.inverse();
            let r = twc.rotation();
            let t = twc.translation();
            match format {
                TrajectoryFormat::Kitti => {
                    let _ = writeln!(
                        out,
                        "{} {} {} {} {} {} {} {} {} {} {} {}",
                        r[(0, 0)],
                        r[(0, 1)],
                        r[(0, 2)],
                        t.x,
                        r[(1, 0)],
                        r[(1, 1)],
                        r[(1, 2)],
                        t.y,
                        r[(2, 0)],
                        r[(2, 1)],
                        r[(2, 2)],
                        t.z
                    );
                }
                TrajectoryFormat::Tum => {
                    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
                    let _ = writeln!(
                        out,
                        "{} {} {} {} {} {} {} {}",
                        e.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
                    );
                }
            }
        }
        out
    }

    /// Parses a trajectory file, detecting the format from the column count.
    pub fn parse(text: &str) -> Result<(Self, TrajectoryFormat), EvalError> {
        let mut entries = Vec::new();
        let mut format = None;
        for (lineno, line) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let values: Vec<f64> = line
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>().map_err(|_| EvalError::Parse {
                        line: lineno,
                        message: format!("invalid number {s:?}"),
                    })
                })
                .collect::<Result<_, _>>()?;
            let this = match values.len() {
                12 => TrajectoryFormat::Kitti,
                8 => TrajectoryFormat::Tum,
                n => {
                    return Err(EvalError::Parse {
                        line: lineno,
                        message: format!("expected 12 (KITTI) or 8 (TUM) columns, found {n}"),
                    })
                }
            };
            if *format.get_or_insert(this) != this {
                return Err(EvalError::Parse {
                    line: lineno,
                    message: "column count changes within the file".into(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(EvalError::Parse {
                    line: lineno,
                    message: "non-finite value".into(),
                });
            }
            let entry = match this {
                TrajectoryFormat::Kitti => {
                    let r = Matrix3::new(
                        values[0], values[1], values[2], values[4], values[5], values[6], values[8],
                        values[9], values[10],
                    );
                    let t = Vector3::new(values[3], values[7], values[11]);
                    let r = if (r * r.transpose() - Matrix3::identity()).abs().max() < 1e-12 {
                        r
                    } else {
                        orthonormalize(&r)
                    };
                    let twc = Pose::from_parts(r, t);
                    let idx = entries.len();
                    TrajectoryEntry {
                        timestamp: idx as f64,
                        pose: twc.inverse(),
                        frame_id: idx as u64,
                    }
                }
                TrajectoryFormat::Tum => {
                    let q = Quaternion::new(values[7], values[4], values[5], values[6]);
                    if q.norm() < 1e-12 {
                        return Err(EvalError::Parse {
                            line: lineno,
                            message: "zero quaternion".into(),
                        });
                    }
                    let q = UnitQuaternion::from_quaternion(q);
                    let twc = Pose::from_quaternion(&q, Vector3::new(values[1], values[2], values[3]));
                    TrajectoryEntry {
                        timestamp: values[0],
                        pose: twc.inverse(),
                        frame_id: entries.len() as u64,
                    }
                }
            };
            if let Some(prev) = entries.last() {
                let prev: &TrajectoryEntry = prev;
                if !(entry.timestamp > prev.timestamp) {
                    return Err(EvalError::Parse {
                        line: lineno,
                        message: format!("timestamp {} does not increase", entry.timestamp),
                    });
                }
            }
            entries.push(entry);
        }
        Ok((Self { entries }, format.unwrap_or(TrajectoryFormat::Tum)))
    }

    pub fn read(path: &Path) -> Result<(Self, TrajectoryFormat), EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }
}
