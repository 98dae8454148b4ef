use std::path::Path;

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Quaternion, Vector3};

use super::{parse_floats, read_text, require, DatasetError, FramePayload, SequenceSource, SourceFrame};
use crate::evaluation::{Trajectory, TrajectoryEntry};
use crate::geometry::{CameraIntrinsics, Pose};

const NS_PER_S: f64 = 1e9;

/// Values of a bracketed list following `key:` in a flat YAML document; the list may
/// span several lines.
fn yaml_list(text: &str, key: &str) -> Option<Vec<f64>> {
    let start = text.find(&format!("{key}:"))?;
    let rest = &text[start..];
    let open = rest.find('[')?;
    let close = rest[open..].find(']')? + open;
    rest[open + 1..close]
        .split(',')
        .map(|t| t.trim().parse::<f64>().ok())
        .collect()
}

fn parse_sensor(path: &Path) -> Result<(CameraIntrinsics, Pose), DatasetError> {
    let text = read_text(path)?;
    let bad = |message: String| DatasetError::MalformedCalibration {
        path: path.to_path_buf(),
        message,
    };
    let k = yaml_list(&text, "intrinsics").ok_or_else(|| bad("missing intrinsics".into()))?;
    let res = yaml_list(&text, "resolution").ok_or_else(|| bad("missing resolution".into()))?;
    if k.len() != 4 || res.len() != 2 {
        return Err(bad(format!("intrinsics/resolution have {}/{} values", k.len(), res.len())));
    }
    let t_bs = match text.find("T_BS:") {
        Some(i) => {
            let v = yaml_list(&text[i..], "data").ok_or_else(|| bad("malformed T_BS".into()))?;
            if v.len() != 16 {
                return Err(bad(format!("T_BS has {} values", v.len())));
            }
            let m = Matrix4::from_row_slice(&v);
            let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
            Pose::from_parts(r, Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]))
        }
        None => Pose::identity(),
    };
    let intr = CameraIntrinsics::new(k[0], k[1], k[2], k[3], res[0] as u32, res[1] as u32).map_err(|e| bad(e.to_string()))?;
    Ok((intr, t_bs))
}

/// Loads an EuRoC MAV sequence from its root (containing `mav0/`). Ground-truth body
/// poses are converted to camera poses with the sensor extrinsic `T_BS`.
pub fn load_euroc(root: &Path) -> Result<SequenceSource, DatasetError> {
    let cam = root.join("mav0").join("cam0");
    let csv = cam.join("data.csv");
    let text = read_text(&csv)?;
    let (intrinsics, t_bs) = parse_sensor(&cam.join("sensor.yaml"))?;
    let mut frames = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (ts, name) = line.split_once(',').ok_or_else(|| DatasetError::Parse {
            path: csv.clone(),
            line: i + 1,
            message: "expected `timestamp,filename`".into(),
        })?;
        let ns: u64 = ts.trim().parse().map_err(|_| DatasetError::Parse {
            path: csv.clone(),
            line: i + 1,
            message: format!("invalid timestamp {ts:?}"),
        })?;
        frames.push(SourceFrame {
            index: frames.len() as u64,
            timestamp: ns as f64 / NS_PER_S,
            payload: FramePayload::Image(cam.join("data").join(name.trim())),
        });
    }
    let gt_path = root.join("mav0").join("state_groundtruth_estimate0").join("data.csv");
    let ground_truth = if gt_path.is_file() {
        Some(parse_ground_truth(&gt_path, &t_bs)?)
    } else {
        None
    };
    SequenceSource::new("euroc", intrinsics, frames, ground_truth)
}

/// Rows `timestamp_ns, px, py, pz, qw, qx, qy, qz, ...` of body-to-world poses.
fn parse_ground_truth(path: &Path, t_bs: &Pose) -> Result<Trajectory, DatasetError> {
    require(path)?;
    let text = read_text(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v = parse_floats(path, i + 1, line)?;
        if v.len() < 8 {
            return Err(DatasetError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected at least 8 columns, found {}", v.len()),
            });
        }
        let ns: u64 = line.split(',').next().unwrap_or("").trim().parse().unwrap_or(v[0] as u64);
        let q = UnitQuaternion::from_quaternion(Quaternion::new(v[4], v[5], v[6], v[7]));
        let t_wb = Pose::from_quaternion(&q, Vector3::new(v[1], v[2], v[3]));
        let t_wc = t_wb.compose(t_bs);
        entries.push(TrajectoryEntry {
            timestamp: ns as f64 / NS_PER_S,
            pose: t_wc.inverse(),
            frame_id: entries.len() as u64,
        });
    }
    Trajectory::new(entries).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}
