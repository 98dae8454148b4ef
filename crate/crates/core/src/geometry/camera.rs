use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Landmark, Pose};

/// Pinhole intrinsics. Pixel coordinates place the center of the top-left pixel at (0, 0).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Outcome of projecting a point through a camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible(Vector2<f64>),
    /// In front of the camera but outside the image bounds.
    OutOfView(Vector2<f64>),
    BehindCamera,
}

impl Projection {
    pub fn visible(self) -> Option<Vector2<f64>> {
        match self {
            Projection::Visible(p) => Some(p),
            _ => None,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn in_image(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Pinhole projection of a camera-frame point, without the depth check.
    pub fn project_unchecked(&self, pc: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * pc.x / pc.z + self.cx, self.fy * pc.y / pc.z + self.cy)
    }

    pub fn project_camera(&self, pc: &Vector3<f64>) -> Projection {
        if pc.z <= 0.0 {
            return Projection::BehindCamera;
        }
        let px = self.project_unchecked(pc);
        if self.in_image(&px) {
            Projection::Visible(px)
        } else {
            Projection::OutOfView(px)
        }
    }

    /// Projects a world point seen from `pose` (T_cw).
    pub fn project(&self, point: &Landmark, pose: &Pose) -> Projection {
        self.project_camera(&pose.transform(&point.position))
    }

    /// Pixel to normalized image-plane coordinates.
    pub fn normalize(&self, px: &Vector2<f64>) -> Vector2<f64> {
        Vector2::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy)
    }

    /// Pixel to homogeneous bearing `(x, y, 1)` in the camera frame.
    pub fn bearing(&self, px: &Vector2<f64>) -> Vector3<f64> {
        let n = self.normalize(px);
        Vector3::new(n.x, n.y, 1.0)
    }
}
