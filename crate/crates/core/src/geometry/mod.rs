//! Rigid and similarity transforms, pinhole projection, two-view estimation,
//! triangulation and point-set alignment.
//!
//! Poses are world-to-camera (`T_cw`) throughout the crate; conversion to the
//! camera-to-world convention happens only when trajectories are written to disk.

mod alignment;
mod camera;
mod pose;
mod triangulation;
mod two_view;

use nalgebra::Vector3;

pub use alignment::{associate, umeyama, umeyama_align, AlignmentError, DEFAULT_ASSOCIATION_TOLERANCE};
pub use camera::{CameraIntrinsics, Projection};
pub use pose::{exp_so3, log_so3, orthonormalize, rotation_angle, skew, Pose, SimTransform};
pub use triangulation::{
    parallax_deg, triangulate, triangulate_dlt, TriangulationConfig, TriangulationError,
};
pub use two_view::{
    decompose_essential, eight_point, estimate_two_view, sampson_distance, RansacConfig,
    TwoViewError, TwoViewEstimate,
};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("invalid rotation: {0}")]
    InvalidRotation(String),
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("non-finite value")]
    NonFinite,
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Geometric payload of a map point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Landmark {
    pub position: Vector3<f64>,
}

impl Landmark {
    pub fn new(position: Vector3<f64>) -> Result<Self, GeometryError> {
        if position.iter().all(|v| v.is_finite()) {
            Ok(Self { position })
        } else {
            Err(GeometryError::NonFinite)
        }
    }
}
