//! Rigid-body geometry: SO(3) rotations, SE(3) poses and their tangent space.
//!
//! Tangent vectors are ordered rotation first, `[φ; ρ]`, throughout the crate
//! (residuals, Jacobians, information matrices). The g2o reader/writer is the
//! only place that permutes to g2o's translation-first convention.

use nalgebra::{Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6, SVD};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Rotation angles at or beyond this are rejected by [`Rot3::log`].
pub const LOG_ANGLE_LIMIT: f64 = PI - 1e-6;

/// Orthonormality error above which a composed rotation is projected back onto SO(3).
const REORTHONORMALIZE_TOLERANCE: f64 = 1e-12;

/// Number of compositions between projections in a [`PoseAccumulator`].
pub const ACCUMULATOR_PROJECTION_PERIOD: usize = 64;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GeometryError {
    #[error("rotation angle {0} rad is too close to pi for a unique logarithm")]
    AngleNearPi(f64),
}

/// Skew-symmetric (cross-product) matrix of `v`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]; reads the antisymmetric part.
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// A 3×3 orthonormal rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rot3(Mat3);

impl Default for Rot3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rot3 {
    pub fn identity() -> Self {
        Rot3(Mat3::identity())
    }

    /// Wraps a matrix that the caller guarantees is a rotation.
    pub fn from_matrix_unchecked(m: Mat3) -> Self {
        Rot3(m)
    }

    /// Projects an arbitrary matrix onto the nearest rotation (polar decomposition).
    pub fn from_matrix(m: Mat3) -> Self {
        Rot3(project_to_so3(&m))
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        Self::exp(&(axis * (angle / n)))
    }

    pub fn rx(angle: f64) -> Self {
        Self::exp(&Vec3::new(angle, 0.0, 0.0))
    }

    pub fn ry(angle: f64) -> Self {
        Self::exp(&Vec3::new(0.0, angle, 0.0))
    }

    pub fn rz(angle: f64) -> Self {
        Self::exp(&Vec3::new(0.0, 0.0, angle))
    }

    /// Roll-pitch-yaw (intrinsic z-y-x) construction.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::rz(yaw) * Self::ry(pitch) * Self::rx(roll)
    }

    /// Builds a rotation from a (not necessarily normalized) quaternion in `(x, y, z, w)` order.
    pub fn from_quaternion(x: f64, y: f64, z: f64, w: f64) -> Self {
        let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
        Rot3(*q.to_rotation_matrix().matrix())
    }

    /// Unit quaternion in `(x, y, z, w)` order with `w >= 0`.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.0));
        let c = q.coords;
        let s = if c.w < 0.0 { -1.0 } else { 1.0 };
        [s * c.x, s * c.y, s * c.z, s * c.w]
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Rot3(self.0.transpose())
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let s = vee(&self.0).norm();
        let c = 0.5 * (self.0.trace() - 1.0);
        s.atan2(c)
    }

    /// Largest absolute entry of `RᵀR − I`.
    pub fn orthonormality_error(&self) -> f64 {
        (self.0.transpose() * self.0 - Mat3::identity()).abs().max()
    }

    pub fn orthonormalized(&self) -> Self {
        Rot3(project_to_so3(&self.0))
    }

    /// Exponential map (Rodrigues).
    pub fn exp(phi: &Vec3) -> Self {
        let theta2 = phi.norm_squared();
        let theta = theta2.sqrt();
        let k = hat(phi);
        let (a, b) = if theta < 1e-5 {
            (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
        } else {
            (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
        };
        Rot3(Mat3::identity() + k * a + k * k * b)
    }

    /// Logarithm map; fails within 1e-6 rad of π where the axis sign is ambiguous.
    pub fn log(&self) -> Result<Vec3, GeometryError> {
        let theta = self.angle();
        if theta >= LOG_ANGLE_LIMIT {
            return Err(GeometryError::AngleNearPi(theta));
        }
        Ok(self.log_unchecked())
    }

    /// Logarithm that also handles angles arbitrarily close to π (the axis sign
    /// is then chosen from the antisymmetric part, which may be ill-determined).
    pub fn log_unchecked(&self) -> Vec3 {
        let w = vee(&self.0);
        let s = w.norm();
        let c = 0.5 * (self.0.trace() - 1.0);
        let theta = s.atan2(c);
        if theta < 1e-4 {
            return w * (1.0 + theta * theta / 6.0);
        }
        if theta < PI - 0.1 {
            return w * (theta / s);
        }
        // Near π: recover the axis from the symmetric part, (1 − cos θ)·a·aᵀ.
        let one_minus_c = 1.0 - c;
        let b = (self.0 + self.0.transpose()) * 0.5 - Mat3::identity() * c;
        let k = (0..3)
            .max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)]))
            .unwrap_or(0);
        let ak = (b[(k, k)] / one_minus_c).max(0.0).sqrt();
        let mut axis = Vec3::zeros();
        for i in 0..3 {
            axis[i] = if i == k { ak } else { b[(i, k)] / (one_minus_c * ak) };
        }
        axis.normalize_mut();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        axis * theta
    }
}

impl Mul for Rot3 {
    type Output = Rot3;
    fn mul(self, rhs: Rot3) -> Rot3 {
        let r = Rot3(self.0 * rhs.0);
        if r.orthonormality_error() > REORTHONORMALIZE_TOLERANCE {
            r.orthonormalized()
        } else {
            r
        }
    }
}

fn project_to_so3(m: &Mat3) -> Mat3 {
    let svd = SVD::new(*m, true, true);
    let (Some(mut u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Mat3::identity();
    };
    if (u * v_t).determinant() < 0.0 {
        let c = -u.column(2);
        u.set_column(2, &c);
    }
    u * v_t
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < 1e-5 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    Mat3::identity() + k * a + k * k * b
}

/// Inverse of the SO(3) left Jacobian.
pub fn so3_left_jacobian_inverse(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let b = if theta < 1e-4 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Mat3::identity() - k * 0.5 + k * k * b
}

/// Off-diagonal block coupling rotation into translation in the SE(3) left Jacobian.
fn se3_q_block(phi: &Vec3, rho: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let p = hat(phi);
    let r = hat(rho);
    let (c1, c2, c3) = if theta < 1e-2 {
        (
            1.0 / 6.0 - theta2 / 120.0,
            1.0 / 24.0 - theta2 / 720.0,
            1.0 / 120.0 - theta2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t3 = theta2 * theta;
        let t4 = theta2 * theta2;
        let t5 = t4 * theta;
        let u = (1.0 - theta2 / 2.0 - c) / t4;
        let v = (theta - s - t3 / 6.0) / t5;
        ((theta - s) / t3, -u, -0.5 * (u - 3.0 * v))
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2 + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3) for a `[φ; ρ]` tangent vector.
pub fn se3_left_jacobian(xi: &Vec6) -> Mat6 {
    let phi = xi.fixed_rows::<3>(0).into_owned();
    let rho = xi.fixed_rows::<3>(3).into_owned();
    let j = so3_left_jacobian(&phi);
    let q = se3_q_block(&phi, &rho);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&q);
    out
}

/// Inverse of the SE(3) left Jacobian.
pub fn se3_left_jacobian_inverse(xi: &Vec6) -> Mat6 {
    let phi = xi.fixed_rows::<3>(0).into_owned();
    let rho = xi.fixed_rows::<3>(3).into_owned();
    let j_inv = so3_left_jacobian_inverse(&phi);
    let q = se3_q_block(&phi, &rho);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j_inv);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-j_inv * q * j_inv));
    out
}

/// Inverse of the SE(3) right Jacobian, `J_r⁻¹(ξ) = J_l⁻¹(−ξ)`.
pub fn se3_right_jacobian_inverse(xi: &Vec6) -> Mat6 {
    se3_left_jacobian_inverse(&(-xi))
}

/// Tangent vector of SE(3): rotation (axis-angle, radians) and translation part (meters).
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Twist6 {
    pub rotation: Vec3,
    pub translation: Vec3,
}

impl Twist6 {
    pub fn new(rotation: Vec3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            rotation: v.fixed_rows::<3>(0).into_owned(),
            translation: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vec6 {
        let mut v = Vec6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.translation);
        v
    }
}

/// Rigid-body transform: `x ↦ R·x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose3 {
    pub rotation: Rot3,
    pub translation: Vec3,
}

impl Default for Pose3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.translation;
        let q = self.rotation.to_quaternion();
        write!(
            f,
            "Pose3(t: [{:.4}, {:.4}, {:.4}], q: [{:.4}, {:.4}, {:.4}, {:.4}])",
            t.x, t.y, t.z, q[0], q[1], q[2], q[3]
        )
    }
}

impl Pose3 {
    pub fn identity() -> Self {
        Self { rotation: Rot3::identity(), translation: Vec3::zeros() }
    }

    pub fn new(rotation: Rot3, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: Rot3::identity(), translation: t }
    }

    pub fn from_rotation(r: Rot3) -> Self {
        Self { rotation: r, translation: Vec3::zeros() }
    }

    /// Planar pose: position and heading about +z.
    pub fn from_xyz_yaw(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Self::new(Rot3::rz(yaw), Vec3::new(x, y, z))
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose3) -> Pose3 {
        Pose3 {
            rotation: self.rotation * other.rotation,
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose3 {
        let r_inv = self.rotation.inverse();
        Pose3 { rotation: r_inv, translation: -r_inv.rotate(&self.translation) }
    }

    /// `self⁻¹ ∘ other`, the pose of `other` expressed in this frame.
    pub fn between(&self, other: &Pose3) -> Pose3 {
        self.inverse().compose(other)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.rotate(p) + self.translation
    }

    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.matrix().tr_mul(&(p - self.translation))
    }

    pub fn exp(xi: &Twist6) -> Pose3 {
        Pose3 {
            rotation: Rot3::exp(&xi.rotation),
            translation: so3_left_jacobian(&xi.rotation) * xi.translation,
        }
    }

    pub fn exp_vector(v: &Vec6) -> Pose3 {
        Self::exp(&Twist6::from_vector(v))
    }

    pub fn log(&self) -> Result<Twist6, GeometryError> {
        let phi = self.rotation.log()?;
        Ok(Twist6 { rotation: phi, translation: so3_left_jacobian_inverse(&phi) * self.translation })
    }

    /// Logarithm without the near-π guard; used for residuals of gross outliers.
    pub fn log_unchecked(&self) -> Twist6 {
        let phi = self.rotation.log_unchecked();
        Twist6 { rotation: phi, translation: so3_left_jacobian_inverse(&phi) * self.translation }
    }

    /// Adjoint in `[φ; ρ]` ordering: `T·exp(ξ)·T⁻¹ = exp(Ad_T ξ)`.
    pub fn adjoint(&self) -> Mat6 {
        let r = self.rotation.matrix();
        let mut ad = Mat6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
        ad.fixed_view_mut::<3, 3>(3, 0).copy_from(&(hat(&self.translation) * r));
        ad
    }

    /// g2o `VERTEX_SE3:QUAT` ordering: `tx ty tz qx qy qz qw`.
    pub fn to_g2o(&self) -> [f64; 7] {
        let t = self.translation;
        let q = self.rotation.to_quaternion();
        [t.x, t.y, t.z, q[0], q[1], q[2], q[3]]
    }

    pub fn from_g2o(v: &[f64; 7]) -> Pose3 {
        Pose3 {
            rotation: Rot3::from_quaternion(v[3], v[4], v[5], v[6]),
            translation: Vec3::new(v[0], v[1], v[2]),
        }
    }

    /// Yaw of the x-axis projected onto the horizontal plane.
    pub fn yaw(&self) -> f64 {
        let m = self.rotation.matrix();
        m[(1, 0)].atan2(m[(0, 0)])
    }
}

impl Mul for Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: Pose3) -> Pose3 {
        self.compose(&rhs)
    }
}

impl Mul<&Pose3> for &Pose3 {
    type Output = Pose3;
    fn mul(self, rhs: &Pose3) -> Pose3 {
        self.compose(rhs)
    }
}

/// Rotation angle of `a.R·b.Rᵀ` and translation distance `‖a.t − b.t‖`.
pub fn geodesic_distances(a: &Pose3, b: &Pose3) -> (f64, f64) {
    let dr = Rot3::from_matrix_unchecked(a.rotation.matrix() * b.rotation.matrix().transpose());
    (dr.angle(), (a.translation - b.translation).norm())
}

/// Running product of poses that projects its rotation back onto SO(3)
/// every [`ACCUMULATOR_PROJECTION_PERIOD`] compositions.
#[derive(Clone, Debug)]
pub struct PoseAccumulator {
    pose: Pose3,
    since_projection: usize,
}

impl Default for PoseAccumulator {
    fn default() -> Self {
        Self::new(Pose3::identity())
    }
}

impl PoseAccumulator {
    pub fn new(start: Pose3) -> Self {
        Self { pose: start, since_projection: 0 }
    }

    /// Right-multiplies the accumulated pose by `delta`.
    pub fn push(&mut self, delta: &Pose3) -> Pose3 {
        self.pose = self.pose.compose(delta);
        self.since_projection += 1;
        if self.since_projection >= ACCUMULATOR_PROJECTION_PERIOD {
            self.pose.rotation = self.pose.rotation.orthonormalized();
            self.since_projection = 0;
        }
        self.pose
    }

    pub fn pose(&self) -> Pose3 {
        self.pose
    }

    pub fn reset(&mut self, pose: Pose3) {
        self.pose = pose;
        self.since_projection = 0;
    }
}
