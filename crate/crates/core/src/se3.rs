//! SE(3) / so(3) arithmetic, tangent-space Jacobians, covariance transport and
//! pinhole projection.
//!
//! Tangent vectors are ordered `[rho; phi]` (translation first, rotation
//! second). Perturbations throughout the crate are applied on the right,
//! `T * exp(delta)`, unless a function says otherwise.

use nalgebra::{Matrix2x3, Matrix3, Matrix4, Matrix6, Rotation3, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec6 = Vector6<f64>;
pub type Mat6 = Matrix6<f64>;

/// Rotation angles at or beyond this are outside the domain of [`Pose::log`].
pub const LOG_ANGLE_LIMIT: f64 = std::f64::consts::PI - 1e-6;

const SMALL_ANGLE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("rotation angle {angle} rad is too close to pi for the logarithm map")]
    LogDomain { angle: f64 },
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error(
        "covariance is not symmetric positive semi-definite (min eigenvalue {min_eigenvalue})"
    )]
    NotPsd { min_eigenvalue: f64 },
    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(String),
}

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues formula.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, one_minus_cos(theta) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// `1 - cos(theta)` without cancellation.
fn one_minus_cos(theta: f64) -> f64 {
    let s = (0.5 * theta).sin();
    2.0 * s * s
}

/// Rotation angle of an orthonormal matrix, in `[0, pi]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let c = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    // acos is ill-conditioned near 0, so combine with the skew part.
    let s = vee(&(r - r.transpose())).norm() * 0.5;
    s.atan2(c)
}

/// Rotation logarithm restricted to angles below [`LOG_ANGLE_LIMIT`].
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let theta = rotation_angle(r);
    if theta >= LOG_ANGLE_LIMIT {
        return Err(GeometryError::LogDomain { angle: theta });
    }
    let w = vee(&(r - r.transpose())) * 0.5;
    let scale = if theta < SMALL_ANGLE {
        1.0 + theta * theta / 6.0
    } else {
        theta / theta.sin()
    };
    Ok(w * scale)
}

/// Axis-angle vector of any rotation, including angles at pi. Used for
/// serialization, where the optimizer's domain restriction does not apply.
pub fn axis_angle(r: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*r).scaled_axis()
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            one_minus_cos(theta) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(phi);
    let b = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / theta2
    };
    Matrix3::identity() - k * 0.5 + k * k * b
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let rx = hat(rho);
    let px = hat(phi);
    // The closed forms lose all precision at small angles.
    let (c1, c2, c3) = if theta < 1e-2 {
        let t4 = theta2 * theta2;
        (
            1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0,
            1.0 / 24.0 - theta2 / 720.0 + t4 / 40320.0,
            1.0 / 120.0 - theta2 / 2520.0 + t4 / 120960.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t4 = theta2 * theta2;
        (
            (theta - s) / (theta2 * theta),
            (theta2 + 2.0 * c - 2.0) / (2.0 * t4),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta),
        )
    };
    let pr = px * rx;
    let rp = rx * px;
    let prp = pr * px;
    rx * 0.5
        + (pr + rp + prp) * c1
        + (px * pr + rp * px - prp * 3.0) * c2
        + (prp * px + px * prp) * c3
}

/// Left Jacobian of SE(3): `exp(xi + d) ~= exp(J_l(xi) d) * exp(xi)`.
pub fn se3_left_jacobian(xi: &Vec6) -> Mat6 {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let j = so3_left_jacobian(&phi);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&se3_q(&rho, &phi));
    out
}

pub fn se3_left_jacobian_inv(xi: &Vec6) -> Mat6 {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let ji = so3_left_jacobian_inv(&phi);
    let q = se3_q(&rho, &phi);
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&ji);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-ji * q * ji));
    out
}

/// Inverse right Jacobian: `log(T * exp(d)) ~= log(T) + J_r^{-1}(log T) d`.
pub fn se3_right_jacobian_inv(xi: &Vec6) -> Mat6 {
    se3_left_jacobian_inv(&(-xi))
}

/// Tangent vector of SE(3).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    /// Translational part (meters).
    pub rho: Vector3<f64>,
    /// Rotational part (radians).
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vec6) -> Self {
        Self {
            rho: v.fixed_rows::<3>(0).into_owned(),
            phi: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn to_vector(&self) -> Vec6 {
        Vec6::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Rigid transform. `rotation` is kept orthonormal with determinant +1.
///
/// A pose named `T^{a,b}` maps coordinates expressed in frame `b` into frame
/// `a`; `compose(T^{a,b}, T^{b,c}) = T^{a,c}`.
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

    /// Builds a pose, projecting `rotation` onto SO(3) with an SVD.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: orthonormalize_svd(&rotation),
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: so3_exp(&axis_angle),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn axis_angle(&self) -> Vector3<f64> {
        axis_angle(&self.rotation)
    }

    pub fn rotation_angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }

    /// Group product `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let r = self.rotation * other.rotation;
        Pose {
            rotation: polish_rotation(&r),
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

    /// `self.inverse() * other` without forming the inverse explicitly.
    pub fn between(&self, other: &Pose) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: polish_rotation(&(rt * other.rotation)),
            translation: rt * (other.translation - self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn exp(t: &Twist) -> Pose {
        let rotation = so3_exp(&t.phi);
        let v = so3_left_jacobian(&t.phi);
        Pose {
            rotation,
            translation: v * t.rho,
        }
    }

    pub fn log(&self) -> Result<Twist, GeometryError> {
        let phi = so3_log(&self.rotation)?;
        let rho = so3_left_jacobian_inv(&phi) * self.translation;
        Ok(Twist { rho, phi })
    }

    /// `self * exp(delta)`.
    pub fn retract(&self, delta: &Vec6) -> Pose {
        self.compose(&Pose::exp(&Twist::from_vector(delta)))
    }

    /// `log(self^{-1} * other)`, the right-tangent difference.
    pub fn local(&self, other: &Pose) -> Result<Vec6, GeometryError> {
        Ok(self.between(other).log()?.to_vector())
    }

    /// Adjoint: `T exp(xi) T^{-1} = exp(Ad(T) xi)`.
    pub fn adjoint(&self) -> Mat6 {
        let mut ad = Mat6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        ad.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * self.rotation));
        ad
    }

    /// Row-major rotation followed by the translation.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.x,
            t.y,
            t.z,
        ]
    }

    /// Inverse of [`Self::to_row_major`]. The rotation is taken verbatim so
    /// that a round trip is bit-exact; callers pass orthonormal input.
    pub fn from_row_major(v: &[f64; 12]) -> Self {
        Self {
            rotation: Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]),
            translation: Vector3::new(v[9], v[10], v[11]),
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Translation distance and rotation angle between two poses.
    pub fn distance(&self, other: &Pose) -> (f64, f64) {
        let d = self.between(other);
        (d.translation.norm(), d.rotation_angle())
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

fn orthonormalize_svd(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        out = u * vt;
    }
    out
}

/// One Newton-Schulz step towards the nearest orthonormal matrix. Enough to
/// remove round-off introduced by a single product.
fn polish_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    r * (Matrix3::identity() * 3.0 - r.transpose() * r) * 0.5
}

/// 6x6 covariance over the SE(3) tangent space (`[rho; phi]` ordering).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance6(Mat6);

impl Covariance6 {
    /// Symmetrizes `m` and checks positive semi-definiteness.
    pub fn new(m: Mat6) -> Result<Self, GeometryError> {
        let sym = symmetrize(&m);
        let min = sym.symmetric_eigenvalues().min();
        let tol = 1e-12 * sym.abs().max().max(1.0);
        if !min.is_finite() || min < -tol {
            return Err(GeometryError::NotPsd {
                min_eigenvalue: min,
            });
        }
        Ok(Self(sym))
    }

    /// Skips the eigenvalue check; the caller guarantees PSD.
    pub fn from_matrix_unchecked(m: Mat6) -> Self {
        Self(symmetrize(&m))
    }

    pub fn zeros() -> Self {
        Self(Mat6::zeros())
    }

    /// Diagonal covariance with the same sigma on every translation axis and
    /// every rotation axis.
    pub fn from_sigmas(translation_sigma: f64, rotation_sigma: f64) -> Self {
        let t = translation_sigma * translation_sigma;
        let r = rotation_sigma * rotation_sigma;
        Self(Mat6::from_diagonal(&Vec6::new(t, t, t, r, r, r)))
    }

    pub fn from_diagonal(d: &Vec6) -> Self {
        Self(Mat6::from_diagonal(d))
    }

    pub fn matrix(&self) -> &Mat6 {
        &self.0
    }

    pub fn diagonal(&self) -> Vec6 {
        self.0.diagonal()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self(self.0 * s)
    }

    pub fn add(&self, other: &Covariance6) -> Self {
        Self(self.0 + other.0)
    }

    pub fn inverse(&self) -> Option<Mat6> {
        self.0.cholesky().map(|c| symmetrize(&c.inverse()))
    }

    /// `Ad(p) * cov * Ad(p)^T`.
    pub fn propagate(&self, p: &Pose) -> Self {
        propagate_covariance(p, self)
    }
}

pub fn symmetrize(m: &Mat6) -> Mat6 {
    (m + m.transpose()) * 0.5
}

pub fn propagate_covariance(p: &Pose, cov: &Covariance6) -> Covariance6 {
    let ad = p.adjoint();
    Covariance6(symmetrize(&(ad * cov.0 * ad.transpose())))
}

/// Pinhole intrinsics, zero distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Points closer than this along the optical axis are not projectable.
pub const MIN_DEPTH: f64 = 1e-6;

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
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::Intrinsics(format!(
                "focal lengths must be positive, got {} {}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(GeometryError::Intrinsics(
                "principal point must be finite".into(),
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::Intrinsics(
                "image size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        if p.z <= MIN_DEPTH {
            return Err(GeometryError::BehindCamera { z: p.z });
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Derivative of [`Self::project`] with respect to the camera-frame point.
    pub fn project_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let iz = 1.0 / p.z;
        let iz2 = iz * iz;
        Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * p.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    pub fn contains(&self, px: &Vector2<f64>) -> bool {
        px.x >= 0.0 && px.y >= 0.0 && px.x < self.width as f64 && px.y < self.height as f64
    }

    /// Unit-depth ray through a pixel.
    pub fn back_project(&self, px: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((px.x - self.cx) / self.fx, (px.y - self.cy) / self.fy, 1.0)
    }
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

/// Derivative of `T * exp(delta)` applied to an object-frame point, with
/// respect to `delta`.
pub fn point_jacobian(pose: &Pose, point: &Vector3<f64>) -> nalgebra::Matrix3x6<f64> {
    let mut j = nalgebra::Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(pose.rotation());
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-pose.rotation() * hat(point)));
    j
}
