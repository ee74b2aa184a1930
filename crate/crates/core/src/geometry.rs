//! Pinhole projection and rigid-body (SE(3)) algebra.
//!
//! Camera frame convention: +x right, +y down, +z forward. All lengths are in
//! meters, all image coordinates in pixels with pixel centers on integers.

use nalgebra::{Matrix3, Vector3, Vector6, SVD};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A 3D point (or displacement) in meters.
pub type Point3 = Vector3<f64>;

/// A twist `(rho, omega)`: translational part first, rotational part last.
pub type Twist = Vector6<f64>;

/// Rotation angles at or beyond `PI - NEAR_PI_MARGIN` are rejected by [`Pose::log`].
pub const NEAR_PI_MARGIN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point depth {0} is not positive")]
    NonPositiveDepth(f64),
    #[error("rotation angle {0} rad is too close to pi for a unique logarithm")]
    NearPiRotation(f64),
    #[error("invalid intrinsics fx={fx} fy={fy} cx={cx} cy={cy}")]
    InvalidIntrinsics { fx: f64, fy: f64, cx: f64, cy: f64 },
    #[error("matrix is not a proper rotation")]
    NotARotation,
}

/// Subpixel image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Pinhole intrinsics `K = [[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx.is_finite()
            && self.cy.is_finite();
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics {
                fx: self.fx,
                fy: self.fy,
                cx: self.cx,
                cy: self.cy,
            })
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Applies `K` to a camera-frame point and divides out the third
    /// homogeneous coordinate. Returns the pixel and the depth `z`.
    pub fn project(&self, p: &Point3) -> Result<(Pixel, f64), GeometryError> {
        if !(p.z > 0.0) {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        let u = (self.fx * p.x + self.cx * p.z) / p.z;
        let v = (self.fy * p.y + self.cy * p.z) / p.z;
        Ok((Pixel::new(u, v), p.z))
    }

    /// Inverse of [`project`](Self::project) for a known depth.
    pub fn backproject(&self, px: &Pixel, depth: f64) -> Result<Point3, GeometryError> {
        if !(depth > 0.0) {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(Point3::new(
            (px.u - self.cx) * depth / self.fx,
            (px.v - self.cy) * depth / self.fy,
            depth,
        ))
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
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

    /// Builds a pose from a rotation that must already be orthonormal with
    /// determinant +1 (within 1e-6); it is projected back onto SO(3).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).norm();
        if !(err < 1e-6) || !(rotation.determinant() > 0.0) || !translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::NotARotation);
        }
        Ok(Self {
            rotation: orthonormalize(&rotation),
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally), then translation `t`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let n = axis.norm();
        let omega = if n > 0.0 { axis * (angle / n) } else { Vector3::zeros() };
        Self {
            rotation: so3_exp(&omega),
            translation: t,
        }
    }

    /// Rotation about `center` followed by a translation `t`:
    /// `x -> R (x - center) + center + t`.
    pub fn rotation_about(center: &Point3, axis: &Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let r = Self::from_axis_angle(axis, angle, Vector3::zeros()).rotation;
        Self {
            rotation: r,
            translation: center - r * center + t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: orthonormalize(&(self.rotation * other.rotation)),
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

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// Rotation angle in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Geodesic angle between the rotations of two poses.
    pub fn rotation_distance(&self, other: &Pose) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation))
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    /// Exponential map of a twist `(rho, omega)`.
    pub fn exp(twist: &Twist) -> Pose {
        let rho = Vector3::new(twist[0], twist[1], twist[2]);
        let omega = Vector3::new(twist[3], twist[4], twist[5]);
        Pose {
            rotation: so3_exp(&omega),
            translation: left_jacobian(&omega) * rho,
        }
    }

    /// Logarithm map; fails within [`NEAR_PI_MARGIN`] of a half turn.
    pub fn log(&self) -> Result<Twist, GeometryError> {
        let omega = so3_log(&self.rotation)?;
        let rho = inverse_left_jacobian(&omega) * self.translation;
        Ok(Twist::new(rho.x, rho.y, rho.z, omega.x, omega.y, omega.z))
    }

    /// Rotation matrix as 9 row-major numbers.
    pub fn rotation_row_major(&self) -> [f64; 9] {
        let r = &self.rotation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)],
            r[(1, 0)], r[(1, 1)], r[(1, 2)],
            r[(2, 0)], r[(2, 1)], r[(2, 2)],
        ]
    }

    pub fn from_row_major(r: &[f64; 9], t: &[f64; 3]) -> Result<Pose, GeometryError> {
        Pose::new(Matrix3::from_row_slice(r), Vector3::new(t[0], t[1], t[2]))
    }
}

pub fn pose_apply(pose: &Pose, p: &Point3) -> Point3 {
    pose.apply(p)
}

pub fn se3_exp(twist: &Twist) -> Pose {
    Pose::exp(twist)
}

pub fn se3_log(pose: &Pose) -> Result<Twist, GeometryError> {
    pose.log()
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Polar projection onto SO(3).
pub fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return *m,
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = 0.5 * w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let (a, b) = if theta < 1e-4 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
        )
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + w * a + w * w * b
}

fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let w = 0.5 * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = w.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if theta >= std::f64::consts::PI - NEAR_PI_MARGIN {
        return Err(GeometryError::NearPiRotation(theta));
    }
    let scale = if theta < 1e-4 {
        1.0 + theta * theta / 6.0 + 7.0 * theta.powi(4) / 360.0
    } else {
        theta / s
    };
    Ok(w * scale)
}

/// `V(omega)` such that the translation of `exp(rho, omega)` is `V rho`.
fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let (b, c) = if theta < 1e-4 {
        (
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + w * b + w * w * c
}

fn inverse_left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(omega);
    let d = if theta < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - w * 0.5 + w * w * d
}
