use std::path::{Path, PathBuf};

use super::{parse_floats, read_text, require, DatasetError, FramePayload, SequenceSource, SourceFrame};
use crate::evaluation::{Trajectory, TrajectoryEntry};
use crate::geometry::{orthonormalize, CameraIntrinsics, Pose};
use crate::imaging::list_sequence_images;

fn sequence_dir(root: &Path, sequence: &str) -> PathBuf {
    let nested = root.join("sequences").join(sequence);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn parse_calibration(path: &Path) -> Result<[f64; 12], DatasetError> {
    let text = read_text(path)?;
    let bad = |message: &str| DatasetError::MalformedCalibration {
        path: path.to_path_buf(),
        message: message.into(),
    };
    let line = text
        .lines()
        .find_map(|l| l.trim().strip_prefix("P0:"))
        .ok_or_else(|| bad("no P0 row"))?;
    let values: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| bad(&format!("not a number: {t:?}"))))
        .collect::<Result<_, _>>()?;
    values.try_into().map_err(|v: Vec<f64>| bad(&format!("P0 has {} values, expected 12", v.len())))
}

/// Loads a KITTI odometry sequence. Accepts either the dataset root (with
/// `sequences/<id>/` and `poses/<id>.txt`) or the sequence directory itself; poses are
/// optional.
pub fn load_kitti(root: &Path, sequence: &str) -> Result<SequenceSource, DatasetError> {
    let dir = sequence_dir(root, sequence);
    let image_dir = dir.join("image_0");
    require(&image_dir)?;
    let p0 = parse_calibration(&dir.join("calib.txt"))?;
    let times_path = dir.join("times.txt");
    let times_text = read_text(&times_path)?;
    let mut times = Vec::new();
    for (i, line) in times_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_floats(&times_path, i + 1, line)?;
        if v.len() != 1 {
            return Err(DatasetError::Parse {
                path: times_path,
                line: i + 1,
                message: format!("expected one timestamp, found {}", v.len()),
            });
        }
        times.push(v[0]);
    }
    let images = list_sequence_images(&image_dir).map_err(|e| DatasetError::Io(image_dir.clone(), e.to_string()))?;
    if images.len() != times.len() {
        return Err(DatasetError::CountMismatch {
            times: times.len(),
            images: images.len(),
        });
    }
    let first = images.first().ok_or_else(|| DatasetError::MissingFiles(image_dir.join("000000.png")))?;
    let (width, height) = image::image_dimensions(first).map_err(|e| DatasetError::Io(first.clone(), e.to_string()))?;
    let intrinsics = CameraIntrinsics::new(p0[0], p0[5], p0[2], p0[6], width, height)
        .map_err(|e| DatasetError::MalformedCalibration {
            path: dir.join("calib.txt"),
            message: e.to_string(),
        })?;

    let pose_candidates = [root.join("poses").join(format!("{sequence}.txt")), dir.join("poses.txt")];
    let ground_truth = match pose_candidates.iter().find(|p| p.is_file()) {
        Some(p) => Some(parse_poses(p, &times)?),
        None => None,
    };
    let frames = images
        .into_iter()
        .zip(&times)
        .enumerate()
        .map(|(i, (path, t))| SourceFrame {
            index: i as u64,
            timestamp: *t,
            payload: FramePayload::Image(path),
        })
        .collect();
    SequenceSource::new(format!("kitti-{sequence}"), intrinsics, frames, ground_truth)
}

/// Camera-to-world 3x4 rows, one per frame, timestamped from `times`.
fn parse_poses(path: &Path, times: &[f64]) -> Result<Trajectory, DatasetError> {
    let text = read_text(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_floats(path, i + 1, line)?;
        if v.len() != 12 {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected 12 values, found {}", v.len()),
            });
        }
        let r = nalgebra::Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = nalgebra::Vector3::new(v[3], v[7], v[11]);
        let twc = Pose::from_parts(orthonormalize(&r), t);
        let idx = entries.len();
        entries.push(TrajectoryEntry {
            timestamp: times.get(idx).copied().unwrap_or(idx as f64),
            pose: twc.inverse(),
            frame_id: idx as u64,
        });
    }
    if entries.len() != times.len() {
        return Err(DatasetError::CountMismatch {
            times: times.len(),
            images: entries.len(),
        });
    }
    Trajectory::new(entries).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}
