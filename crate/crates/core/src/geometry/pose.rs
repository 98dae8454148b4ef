use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector6};

use super::GeometryError;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Skew-symmetric cross-product matrix of `v`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula: axis-angle vector to rotation matrix.
pub fn exp_so3(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-16 {
        // second-order Taylor expansion keeps the result orthonormal to ~1e-24
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    Matrix3::identity() + (theta.sin() / theta) * k + ((1.0 - theta.cos()) / theta2) * k * k
}

/// Inverse of [`exp_so3`], returning the axis-angle vector with angle in [0, pi].
pub fn log_so3(r: &Matrix3<f64>) -> Vector3<f64> {
    let rot = Rotation3::from_matrix_unchecked(*r);
    UnitQuaternion::from_rotation_matrix(&rot).scaled_axis()
}

/// Rotation angle in radians of a rotation matrix.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    log_so3(r).norm()
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

/// One Newton step of the polar decomposition. Pulls a nearly orthonormal product back
/// onto the rotation group so round-off cannot accumulate through repeated composition.
#[inline]
fn renormalize(r: Matrix3<f64>) -> Matrix3<f64> {
    1.5 * r - 0.5 * (r * r.transpose() * r)
}

fn check_rotation(r: &Matrix3<f64>) -> Result<(), GeometryError> {
    if !r.iter().all(|x| x.is_finite()) {
        return Err(GeometryError::InvalidRotation("non-finite entry".into()));
    }
    let err = (r * r.transpose() - Matrix3::identity()).abs().max();
    if err > ORTHONORMAL_TOL {
        return Err(GeometryError::InvalidRotation(format!(
            "R*R^T deviates from identity by {err:e}"
        )));
    }
    let det = r.determinant();
    if (det - 1.0).abs() > ORTHONORMAL_TOL {
        return Err(GeometryError::InvalidRotation(format!("determinant {det}")));
    }
    Ok(())
}

/// Rigid transform mapping world coordinates into camera coordinates (T_cw).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking that `rotation` is orthonormal with det +1.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Builds a pose from a rotation that is known to be valid up to rounding.
    /// The rotation is re-projected onto SO(3).
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: exp_so3(&axis_angle),
            translation,
        }
    }

    /// Builds T_cw from a camera-to-world rotation and camera center.
    pub fn from_camera_to_world(r_wc: Matrix3<f64>, center: Vector3<f64>) -> Self {
        let r_cw = orthonormalize(&r_wc.transpose());
        Self {
            rotation: r_cw,
            translation: -(r_cw * center),
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Transform that applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Applies a 6-vector increment `(omega, v)`: R <- R * Exp(omega), t <- t + v.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        let w = Vector3::new(delta[0], delta[1], delta[2]);
        let v = Vector3::new(delta[3], delta[4], delta[5]);
        Pose {
            rotation: renormalize(self.rotation * exp_so3(&w)),
            translation: self.translation + v,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Largest absolute entry-wise difference of the 3x4 matrices.
    pub fn max_difference(&self, other: &Pose) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }

    /// Rescales the translation, i.e. the pose of the same camera in a world scaled by `s`.
    pub fn scaled(&self, s: f64) -> Pose {
        Pose {
            rotation: self.rotation,
            translation: self.translation * s,
        }
    }
}

/// 7-DoF similarity `x -> scale * R * x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimTransform {
    scale: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for SimTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl SimTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(
        scale: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self, GeometryError> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(GeometryError::InvalidScale(scale));
        }
        check_rotation(&rotation)?;
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    pub(crate) fn from_parts(scale: f64, rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        debug_assert!(scale > 0.0);
        Self {
            scale,
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    pub fn from_pose(pose: &Pose) -> Self {
        Self {
            scale: 1.0,
            rotation: pose.rotation,
            translation: pose.translation,
        }
    }

    /// Exponential-style construction from (axis-angle, translation, log-scale).
    pub fn from_params(w: &Vector3<f64>, t: &Vector3<f64>, log_scale: f64) -> Self {
        Self {
            scale: log_scale.exp(),
            rotation: exp_so3(w),
            translation: *t,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    /// Similarity that applies `other` first, then `self`.
    pub fn compose(&self, other: &SimTransform) -> SimTransform {
        SimTransform {
            scale: self.scale * other.scale,
            rotation: renormalize(self.rotation * other.rotation),
            translation: self.scale * (self.rotation * other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> SimTransform {
        let rt = self.rotation.transpose();
        let inv_s = 1.0 / self.scale;
        SimTransform {
            scale: inv_s,
            rotation: rt,
            translation: -(inv_s * (rt * self.translation)),
        }
    }

    /// Rigid pose of a camera whose similarity world-to-camera transform is `self`.
    ///
    /// Pinhole projection is invariant to the uniform scale, so the scale is divided out
    /// of the translation.
    pub fn to_pose(&self) -> Pose {
        Pose {
            rotation: self.rotation,
            translation: self.translation / self.scale,
        }
    }

    pub fn max_difference(&self, other: &SimTransform) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt).max((self.scale - other.scale).abs())
    }
}
