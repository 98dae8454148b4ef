use std::f64::consts::TAU;

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{FramePayload, SequenceSource, SourceFrame};
use crate::evaluation::{Trajectory, TrajectoryEntry};
use crate::features::{BitDescriptor, Descriptor, Keypoint};
use crate::geometry::{CameraIntrinsics, Landmark, Pose, Projection};
use crate::imaging::GrayImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    /// Straight sideways motion along +x, looking down +z.
    Line,
    /// Part of a circle, looking outward.
    Arc,
    /// A full circle plus a revisited stretch of the start.
    Loop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorRegime {
    /// A fixed random 256-bit string per landmark.
    IdExact,
    /// A per-landmark unit vector plus Gaussian noise per observation.
    NoisyReal,
}

/// Scene description. Landmarks fill a band `depth_min..depth_max` in front of the path
/// and `-height..height` vertically; for circular paths the band is a cylindrical shell
/// outside the camera circle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub landmarks: usize,
    pub frames: usize,
    pub path: PathKind,
    /// Camera circle radius (arc and loop) or path length (line).
    pub path_size: f64,
    /// Swept angle of an arc, degrees.
    pub arc_degrees: f64,
    /// Fraction of a full turn travelled again after closing a loop.
    pub revisit: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub height: f64,
    /// Pixel noise standard deviation.
    pub noise_sigma: f64,
    /// Probability that an observation is moved to a random pixel.
    pub outlier_rate: f64,
    pub descriptors: DescriptorRegime,
    pub descriptor_dim: usize,
    pub descriptor_noise: f64,
    /// Emit rendered grayscale images instead of features.
    pub render: bool,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height_px: u32,
    /// Seconds between frames.
    pub frame_interval: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            landmarks: 500,
            frames: 100,
            path: PathKind::Arc,
            path_size: 4.0,
            arc_degrees: 60.0,
            revisit: 0.15,
            depth_min: 3.0,
            depth_max: 7.0,
            height: 2.0,
            noise_sigma: 0.0,
            outlier_rate: 0.0,
            descriptors: DescriptorRegime::IdExact,
            descriptor_dim: 64,
            descriptor_noise: 0.02,
            render: false,
            fx: 450.0,
            fy: 450.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height_px: 480,
            frame_interval: 0.1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.frames < 2 || self.landmarks == 0 {
            return Err("need at least two frames and one landmark".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(format!("outlier rate must lie in [0, 1), got {}", self.outlier_rate));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return Err("need 0 < depth_min < depth_max".into());
        }
        if !(self.path_size > 0.0 && self.frame_interval > 0.0) {
            return Err("path size and frame interval must be positive".into());
        }
        if self.descriptors == DescriptorRegime::NoisyReal && self.descriptor_dim == 0 {
            return Err("descriptor dimension must be positive".into());
        }
        self.intrinsics().map(|_| ())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, String> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height_px).map_err(|e| e.to_string())
    }

    /// Swept path angle in radians for circular paths.
    fn sweep(&self) -> f64 {
        match self.path {
            PathKind::Line => 0.0,
            PathKind::Arc => self.arc_degrees.to_radians(),
            PathKind::Loop => TAU * (1.0 + self.revisit),
        }
    }

    /// Ground-truth world-to-camera pose at path parameter `u` in [0, 1].
    pub fn pose_at(&self, u: f64) -> Pose {
        match self.path {
            PathKind::Line => Pose::from_camera_to_world(Matrix3::identity(), Vector3::new(u * self.path_size, 0.0, 0.0)),
            PathKind::Arc | PathKind::Loop => {
                let th = u * self.sweep();
                let z = Vector3::new(th.cos(), 0.0, th.sin());
                let y = Vector3::new(0.0, 1.0, 0.0);
                let x = y.cross(&z);
                let r_wc = Matrix3::from_columns(&[x, y, z]);
                Pose::from_camera_to_world(r_wc, z * self.path_size)
            }
        }
    }
}

/// Generated scene with its ground truth and the per-observation landmark labels.
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub config: SceneConfig,
    pub landmarks: Vec<Landmark>,
    pub trajectory: Trajectory,
    /// Landmark index of every emitted keypoint, `None` for outliers.
    pub labels: Vec<Vec<Option<usize>>>,
}

fn bit_descriptor(rng: &mut ChaCha8Rng) -> BitDescriptor {
    let bytes: Vec<u8> = (0..32).map(|_| rng.random()).collect();
    BitDescriptor::from_bytes(&bytes, 256)
}

fn place_landmarks(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Landmark> {
    // the band extends past the ends of the path by roughly one field of view
    let fov = (cfg.width as f64 / (2.0 * cfg.fx)).atan();
    (0..cfg.landmarks)
        .map(|_| {
            let depth = rng.random_range(cfg.depth_min..cfg.depth_max);
            let y = rng.random_range(-cfg.height..cfg.height);
            let p = match cfg.path {
                PathKind::Line => {
                    let margin = depth * fov.tan();
                    let x = rng.random_range(-margin..cfg.path_size + margin);
                    Vector3::new(x, y, depth)
                }
                PathKind::Arc | PathKind::Loop => {
                    let rho = cfg.path_size + depth;
                    let phi = if cfg.path == PathKind::Loop {
                        rng.random_range(0.0..TAU)
                    } else {
                        rng.random_range(-fov..cfg.sweep() + fov)
                    };
                    Vector3::new(rho * phi.cos(), y, rho * phi.sin())
                }
            };
            Landmark { position: p }
        })
        .collect()
}

/// Deterministically generates a scene and its feature (or image) sequence.
pub fn generate_synthetic(cfg: &SceneConfig, seed: u64) -> Result<(SyntheticScene, SequenceSource), String> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let landmarks = place_landmarks(cfg, &mut rng);
    let bits: Vec<BitDescriptor> = (0..landmarks.len()).map(|_| bit_descriptor(&mut rng)).collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let bases: Vec<Vec<f32>> = match cfg.descriptors {
        DescriptorRegime::IdExact => Vec::new(),
        DescriptorRegime::NoisyReal => (0..landmarks.len())
            .map(|_| normalized((0..cfg.descriptor_dim).map(|_| unit.sample(&mut rng)).collect()))
            .collect(),
    };
    let pixel_noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| e.to_string())?;
    let desc_noise = Normal::new(0.0, cfg.descriptor_noise.max(0.0)).map_err(|e| e.to_string())?;
    let patches: Vec<[u8; PATCH * PATCH]> = if cfg.render {
        (0..landmarks.len()).map(|_| patch(&mut rng)).collect()
    } else {
        Vec::new()
    };

    let mut entries = Vec::with_capacity(cfg.frames);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut labels = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let u = f as f64 / (cfg.frames - 1) as f64;
        let pose = cfg.pose_at(u);
        let timestamp = f as f64 * cfg.frame_interval;
        entries.push(TrajectoryEntry {
            timestamp,
            pose,
            frame_id: f as u64,
        });
        let mut keypoints = Vec::new();
        let mut descriptors = Vec::new();
        let mut frame_labels = Vec::new();
        let mut drawn: Vec<(f64, Vector2<f64>, usize)> = Vec::new();
        for (id, lm) in landmarks.iter().enumerate() {
            let Projection::Visible(px) = k.project(lm, &pose) else { continue };
            if cfg.render {
                drawn.push((pose.transform(&lm.position).z, px, id));
                continue;
            }
            let mut obs = px;
            let mut label = Some(id);
            if cfg.noise_sigma > 0.0 {
                obs += Vector2::new(pixel_noise.sample(&mut rng), pixel_noise.sample(&mut rng));
            }
            if cfg.outlier_rate > 0.0 && rng.random::<f64>() < cfg.outlier_rate {
                obs = Vector2::new(rng.random_range(0.0..cfg.width as f64), rng.random_range(0.0..cfg.height_px as f64));
                label = None;
            }
            let d = match cfg.descriptors {
                DescriptorRegime::IdExact => Descriptor::Binary(bits[id].clone()),
                DescriptorRegime::NoisyReal => Descriptor::Real(normalized(
                    bases[id].iter().map(|b| *b as f64 + desc_noise.sample(&mut rng)).collect(),
                )),
            };
            keypoints.push(Keypoint::at(obs.x, obs.y));
            descriptors.push(d);
            frame_labels.push(label);
        }
        let payload = if cfg.render {
            FramePayload::Raster(render(cfg, &mut drawn, &patches, seed ^ f as u64))
        } else {
            FramePayload::Features { keypoints, descriptors }
        };
        frames.push(SourceFrame {
            index: f as u64,
            timestamp,
            payload,
        });
        labels.push(frame_labels);
    }
    let trajectory = Trajectory::new(entries).map_err(|e| e.to_string())?;
    let source = SequenceSource::new(format!("synthetic-{seed}"), k, frames, Some(trajectory.clone())).map_err(|e| e.to_string())?;
    Ok((
        SyntheticScene {
            config: cfg.clone(),
            landmarks,
            trajectory,
            labels,
        },
        source,
    ))
}

fn normalized(v: Vec<f64>) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| (x / n) as f32).collect()
}

const PATCH: usize = 12;
const BLOCK: usize = 3;

/// High-contrast block texture: a 4x4 grid of dark or bright 3-pixel blocks.
fn patch(rng: &mut ChaCha8Rng) -> [u8; PATCH * PATCH] {
    let cells = PATCH / BLOCK;
    let tone: Vec<u8> = (0..cells * cells)
        .map(|_| if rng.random::<bool>() { rng.random_range(200..=240) } else { rng.random_range(15..=50) })
        .collect();
    let mut out = [0u8; PATCH * PATCH];
    for y in 0..PATCH {
        for x in 0..PATCH {
            out[y * PATCH + x] = tone[(y / BLOCK) * cells + x / BLOCK];
        }
    }
    out
}

/// Renders landmark patches far to near over a mid-gray background with mild noise.
fn render(cfg: &SceneConfig, drawn: &mut [(f64, Vector2<f64>, usize)], patches: &[[u8; PATCH * PATCH]], seed: u64) -> GrayImage {
    let (w, h) = (cfg.width as usize, cfg.height_px as usize);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<u8> = (0..w * h).map(|_| rng.random_range(120..=136)).collect();
    let mut img = GrayImage::new(w, h, data).expect("matching buffer size");
    drawn.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
    for (_, px, id) in drawn.iter() {
        let x0 = px.x.round() as i64 - (PATCH / 2) as i64;
        let y0 = px.y.round() as i64 - (PATCH / 2) as i64;
        for dy in 0..PATCH {
            for dx in 0..PATCH {
                let (x, y) = (x0 + dx as i64, y0 + dy as i64);
                if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    img.set(x as usize, y as usize, patches[*id][dy * PATCH + dx]);
                }
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loop_path_returns_to_start() {
        let cfg = SceneConfig {
            path: PathKind::Loop,
            revisit: 0.0,
            ..Default::default()
        };
        assert!(cfg.pose_at(0.0).max_difference(&cfg.pose_at(1.0)) < 1e-9);
    }

    #[test]
    fn rejects_invalid_rates() {
        let cfg = SceneConfig {
            outlier_rate: 1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = SceneConfig {
            noise_sigma: -1.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
