//! Keypoints, descriptors, the scale pyramid, the built-in FAST/BRIEF baseline,
//! external feature files and the two-threshold matcher.

mod descriptor;
mod detector;
mod feature_file;
mod matcher;
mod pyramid;

use serde::{Deserialize, Serialize};

pub use descriptor::{BitDescriptor, Descriptor, DescriptorKind};
pub use detector::{detect_and_describe, DetectorConfig};
pub use feature_file::{load_external_features, FeatureFile, FeatureFrame};
pub use matcher::{match_descriptors, Match, MatchMode, MatchThresholds};
pub use pyramid::{build_pyramid, level_dimensions};

pub(crate) use descriptor::representative_index;
pub(crate) use matcher::BestTwo;

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("pyramid too deep: level {level} of a {width}x{height} image has zero pixels")]
    ConfigTooDeep { level: usize, width: usize, height: usize },
    #[error("invalid pyramid configuration: {0}")]
    InvalidPyramid(String),
    #[error("invalid match thresholds: {0}")]
    InvalidThresholds(String),
    #[error("empty image")]
    EmptyImage,
    #[error("frame {0} not present in feature file")]
    MissingFrame(u64),
    #[error("malformed feature file: {0}")]
    MalformedRecord(String),
    #[error("descriptor lengths differ within a frame ({0} vs {1})")]
    MixedDescriptorLength(usize, usize),
    #[error("descriptor variants differ: {0:?} vs {1:?}")]
    VariantMismatch(DescriptorKind, DescriptorKind),
    #[error("io error on {0}: {1}")]
    Io(String, String),
}

/// A detected feature. Coordinates are always in level-0 (full resolution) pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub octave: usize,
    pub scale: f64,
    /// Radians in [-pi, pi).
    pub orientation: f64,
    pub response: f64,
}

impl Keypoint {
    pub fn at(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            octave: 0,
            scale: 1.0,
            orientation: 0.0,
            response: 1.0,
        }
    }

    pub fn position(&self) -> nalgebra::Vector2<f64> {
        nalgebra::Vector2::new(self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    pub scale_factor: f64,
    pub n_levels: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self {
            scale_factor: 2.0,
            n_levels: 3,
        }
    }
}

impl PyramidConfig {
    pub fn new(scale_factor: f64, n_levels: usize) -> Result<Self, FeatureError> {
        let cfg = Self {
            scale_factor,
            n_levels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if !(self.scale_factor.is_finite() && self.scale_factor > 1.0) {
            return Err(FeatureError::InvalidPyramid(format!(
                "scale factor must exceed 1, got {}",
                self.scale_factor
            )));
        }
        if self.n_levels == 0 {
            return Err(FeatureError::InvalidPyramid("need at least one level".into()));
        }
        Ok(())
    }

    pub fn level_scale(&self, octave: usize) -> f64 {
        self.scale_factor.powi(octave as i32)
    }

    /// Inverse measurement variance of a keypoint detected at `octave`.
    pub fn inv_sigma2(&self, octave: usize) -> f64 {
        1.0 / self.level_scale(octave).powi(2)
    }
}

/// Checks the per-frame invariants: equal counts, one descriptor variant and length.
pub fn validate_frame_features(keypoints: &[Keypoint], descriptors: &[Descriptor]) -> Result<(), FeatureError> {
    if keypoints.len() != descriptors.len() {
        return Err(FeatureError::MalformedRecord(format!(
            "{} keypoints but {} descriptors",
            keypoints.len(),
            descriptors.len()
        )));
    }
    if let Some(first) = descriptors.first() {
        let kind = first.kind();
        for d in &descriptors[1..] {
            let k = d.kind();
            if k != kind {
                return Err(if std::mem::discriminant(&k) == std::mem::discriminant(&kind) {
                    FeatureError::MixedDescriptorLength(kind.len(), k.len())
                } else {
                    FeatureError::VariantMismatch(kind, k)
                });
            }
        }
    }
    Ok(())
}
