//! Rigid-body geometry, the pinhole camera, PnP and two-frame refinement.
//!
//! Poses are stored as a rotation matrix plus translation. A pose `T` maps
//! points from its child frame into its parent frame: `p_parent = R p_child + t`.
//! Optimizers perturb poses on the right with a 6-vector tangent
//! `(ω, v)`: `T ∘ exp(δ) = (R·Exp(ω), R·v + t)`.

mod ba;
mod pnp;

pub use ba::{bundle_adjust_pair, pair_cost, pair_cost_gradient, BaConfig, BaResult};
pub use pnp::{
    refine_pose, reprojection_cost, reprojection_cost_gradient, solve_pnp_ransac, PnpSolution,
    RansacConfig,
};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("too few correspondences: {got} < {min}")]
    TooFewCorrespondences { got: usize, min: usize },
    #[error("no consensus: best inlier count {best} < {min}")]
    NoConsensus { best: usize, min: usize },
    #[error("optimization diverged")]
    DivergedOptimization,
    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),
}

/// Rigid 6DoF transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
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

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation about `axis` (need not be normalized) by `angle` radians.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let axis = axis.normalize();
        Self::new(
            *Rotation3::from_scaled_axis(axis * angle).matrix(),
            translation,
        )
    }

    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self::from_axis_angle(Vector3::z(), yaw, translation)
    }

    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Self {
        // [w, x, y, z]
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        Self::new(*uq.to_rotation_matrix().matrix(), translation)
    }

    /// Rotation as a unit quaternion `[w, x, y, z]` with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let mut c = [q.w, q.i, q.j, q.k];
        if c[0] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        c
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
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

    /// `self⁻¹ ∘ other`, the pose of `other` expressed in `self`'s frame.
    pub fn between(&self, other: &Pose) -> Pose {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn exp(tangent: &Vector6<f64>) -> Pose {
        let omega = Vector3::new(tangent[0], tangent[1], tangent[2]);
        Pose {
            rotation: *Rotation3::from_scaled_axis(omega).matrix(),
            translation: Vector3::new(tangent[3], tangent[4], tangent[5]),
        }
    }

    /// Inverse of [`Pose::exp`]: `(Log(R), t)`.
    pub fn log(&self) -> Vector6<f64> {
        let omega = rotation_log(&self.rotation);
        Vector6::new(
            omega[0],
            omega[1],
            omega[2],
            self.translation[0],
            self.translation[1],
            self.translation[2],
        )
    }

    /// Right perturbation `self ∘ exp(delta)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Pose {
        self.compose(&Pose::exp(delta))
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_log(&self.rotation).norm()
    }

    pub fn translation_norm(&self) -> f64 {
        self.translation.norm()
    }

    /// Re-orthonormalizes the rotation (SVD projection onto SO(3)).
    pub fn normalized(&self) -> Pose {
        let svd = self.rotation.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut r = u * vt;
        if r.determinant() < 0.0 {
            let mut u2 = u;
            u2.column_mut(2).neg_mut();
            r = u2 * vt;
        }
        Pose::new(r, self.translation)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let ortho = (r * r.transpose() - Matrix3::identity()).abs().max();
        ortho <= tol && (r.determinant() - 1.0).abs() <= tol && self.translation.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise difference of rotation and translation.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        let dr = (self.rotation - other.rotation).abs().max();
        let dt = (self.translation - other.translation).abs().max();
        dr.max(dt)
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

fn rotation_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let v = 0.5 * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let s = v.norm();
    let c = 0.5 * (r.trace() - 1.0);
    let theta = s.atan2(c);
    if s > 1e-9 {
        return v * (theta / s);
    }
    if c > 0.0 {
        return v;
    }
    // Rotation by π: the axis is the dominant column of (R + I) / 2.
    let b = 0.5 * (r + Matrix3::identity());
    let k = (0..3).max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)])).unwrap();
    let axis = b.column(k) / b[(k, k)].max(1e-300).sqrt();
    axis.normalize() * std::f64::consts::PI
}

/// Skew-symmetric cross-product matrix.
pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Compact serialized form: quaternion `[w, x, y, z]` plus translation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PoseRecord {
    pub q: [f64; 4],
    pub t: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        PoseRecord {
            q: p.quaternion(),
            t: [p.translation[0], p.translation[1], p.translation[2]],
        }
    }
}

impl From<&PoseRecord> for Pose {
    fn from(r: &PoseRecord) -> Self {
        Pose::from_quaternion(r.q, Vector3::new(r.t[0], r.t[1], r.t[2]))
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(d)?;
        Ok(Pose::from(&rec))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 500.0,
            fy: 500.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeomError> {
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

    pub fn validate(&self) -> Result<(), GeomError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeomError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeomError::InvalidIntrinsics("principal point outside image".into()));
        }
        Ok(())
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeomError> {
        if p.z <= 0.0 {
            return Err(GeomError::NonPositiveDepth(p.z));
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn back_project(&self, pixel: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>, GeomError> {
        if depth <= 0.0 {
            return Err(GeomError::NonPositiveDepth(depth));
        }
        Ok(Vector3::new(
            (pixel.x - self.cx) / self.fx * depth,
            (pixel.y - self.cy) / self.fy * depth,
            depth,
        ))
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }

    /// Jacobian of the projection with respect to the camera-frame point.
    pub(crate) fn projection_jacobian(&self, p: &Vector3<f64>) -> nalgebra::Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }
}

/// 3D point in a reference frame paired with its observed pixel in a camera.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub point3: Vector3<f64>,
    pub pixel: Vector2<f64>,
}

impl Correspondence {
    pub fn new(point3: Vector3<f64>, pixel: Vector2<f64>) -> Self {
        Self { point3, pixel }
    }
}
