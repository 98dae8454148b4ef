//! Image sequence sources: KITTI odometry and EuRoC MAV directory layouts, and a
//! synthetic scene generator with exact ground truth.

mod euroc;
mod kitti;
mod synthetic;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::evaluation::Trajectory;
use crate::features::{Descriptor, FeatureFile, Keypoint};
use crate::geometry::CameraIntrinsics;
use crate::imaging::GrayImage;

pub use euroc::load_euroc;
pub use kitti::load_kitti;
pub use synthetic::{generate_synthetic, DescriptorRegime, PathKind, SceneConfig, SyntheticScene};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file or directory: {0}")]
    MissingFiles(PathBuf),
    #[error("malformed calibration in {path}: {message}")]
    MalformedCalibration { path: PathBuf, message: String },
    #[error("{times} timestamps but {images} images")]
    CountMismatch { times: usize, images: usize },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("timestamps must strictly increase (at frame {0})")]
    NonIncreasingTimestamps(usize),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("no features for frame {0} in the feature file")]
    MissingFeatures(u64),
    #[error("{0}: {1}")]
    Io(PathBuf, String),
}

#[derive(Clone, Debug)]
pub enum FramePayload {
    /// Image on disk, decoded on demand.
    Image(PathBuf),
    Features {
        keypoints: Vec<Keypoint>,
        descriptors: Vec<Descriptor>,
    },
    Raster(GrayImage),
}

#[derive(Clone, Debug)]
pub struct SourceFrame {
    pub index: u64,
    pub timestamp: f64,
    pub payload: FramePayload,
}

#[derive(Clone, Debug)]
pub struct SequenceSource {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub ground_truth: Option<Trajectory>,
    frames: Vec<SourceFrame>,
}

impl SequenceSource {
    pub fn new(
        name: impl Into<String>,
        intrinsics: CameraIntrinsics,
        frames: Vec<SourceFrame>,
        ground_truth: Option<Trajectory>,
    ) -> Result<Self, DatasetError> {
        intrinsics
            .validate()
            .map_err(|e| DatasetError::InvalidIntrinsics(e.to_string()))?;
        for (i, w) in frames.windows(2).enumerate() {
            if !(w[1].timestamp > w[0].timestamp) {
                return Err(DatasetError::NonIncreasingTimestamps(i + 1));
            }
        }
        Ok(Self {
            name: name.into(),
            intrinsics,
            ground_truth,
            frames,
        })
    }

    pub fn frames(&self) -> &[SourceFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SourceFrame> {
        self.frames.iter()
    }

    /// Replaces every frame's payload with precomputed features keyed by frame index.
    pub fn with_features(mut self, file: &FeatureFile) -> Result<Self, DatasetError> {
        for f in &mut self.frames {
            let (keypoints, descriptors) = file.frame(f.index).map_err(|_| DatasetError::MissingFeatures(f.index))?;
            f.payload = FramePayload::Features { keypoints, descriptors };
        }
        Ok(self)
    }

    /// Applies `f` to every in-memory raster and every on-disk image, producing rasters.
    pub fn map_images(mut self, f: impl Fn(&GrayImage) -> GrayImage) -> Result<Self, DatasetError> {
        for fr in &mut self.frames {
            let img = match &fr.payload {
                FramePayload::Image(p) => GrayImage::load(p).map_err(|e| DatasetError::Io(p.clone(), e.to_string()))?,
                FramePayload::Raster(r) => r.clone(),
                FramePayload::Features { .. } => continue,
            };
            fr.payload = FramePayload::Raster(f(&img));
        }
        Ok(self)
    }
}

pub(crate) fn require(path: &Path) -> Result<(), DatasetError> {
    if path.exists() {
        Ok(())
    } else {
        Err(DatasetError::MissingFiles(path.to_path_buf()))
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, DatasetError> {
    require(path)?;
    std::fs::read_to_string(path).map_err(|e| DatasetError::Io(path.to_path_buf(), e.to_string()))
}

pub(crate) fn parse_floats(path: &Path, line: usize, text: &str) -> Result<Vec<f64>, DatasetError> {
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>().map_err(|_| DatasetError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("not a number: {t:?}"),
            })
        })
        .collect()
}
