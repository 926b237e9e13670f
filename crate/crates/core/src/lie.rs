//! SE(3) / SO(3) utilities: twists, the exponential map, composition and the
//! small perturbations used by the numerical Jacobian.
//!
//! Twists are ordered `(omega, rho)`: axes 1..=3 are rotational, 4..=6 translational.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};

use crate::cloud::{Point, PointCloud};
use crate::error::{Error, Result};

/// Below this rotation angle the Rodrigues and left-Jacobian coefficients
/// switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Number of chained products after which the rotation block is projected
/// back onto SO(3).
pub const REORTHONORMALIZE_AFTER: u32 = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub omega: Vector3<f64>,
    pub rho: Vector3<f64>,
}

impl Twist {
    pub fn new(omega: Vector3<f64>, rho: Vector3<f64>) -> Self {
        Self { omega, rho }
    }

    pub fn zero() -> Self {
        Self::new(Vector3::zeros(), Vector3::zeros())
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]))
    }

    /// Unit twist along axis `j` (1-based), scaled by `t`.
    pub fn axis(j: usize, t: f64) -> Result<Self> {
        if !(1..=6).contains(&j) {
            return Err(Error::InvalidAxis(j));
        }
        let mut v = Vector6::zeros();
        v[j - 1] = t;
        Ok(Self::from_vector(&v))
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.omega[0],
            self.omega[1],
            self.omega[2],
            self.rho[0],
            self.rho[1],
            self.rho[2],
        )
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

impl std::ops::Neg for Twist {
    type Output = Twist;

    fn neg(self) -> Twist {
        Twist::new(-self.omega, -self.rho)
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Maps a twist into the 4x4 matrix representation of se(3).
pub fn wedge(xi: &Twist) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(&xi.omega));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&xi.rho);
    m
}

/// Coefficients `(sin θ/θ, (1-cos θ)/θ², (θ-sin θ)/θ³)` shared by Rodrigues and J_l.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64) {
    if theta < SMALL_ANGLE {
        let t2 = theta * theta;
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0)
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        (s / theta, (1.0 - c) / t2, (theta - s) / (t2 * theta))
    }
}

pub fn exp_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _) = rodrigues_coefficients(omega.norm());
    let k = skew(omega);
    Matrix3::identity() + k * a + k * k * b
}

/// Left Jacobian of SO(3).
pub fn left_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let (_, b, c) = rodrigues_coefficients(omega.norm());
    let k = skew(omega);
    Matrix3::identity() + k * b + k * k * c
}

pub fn exp_se3(xi: &Twist) -> RigidTransform {
    RigidTransform::new(exp_so3(&xi.omega), left_jacobian(&xi.omega) * xi.rho)
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        r = u * flip * v_t;
    }
    r
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    rot_x_cs(c, s)
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    rot_y_cs(c, s)
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    rot_z_cs(c, s)
}

pub(crate) fn rot_x_cs(c: f64, s: f64) -> Matrix3<f64> {
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub(crate) fn rot_y_cs(c: f64, s: f64) -> Matrix3<f64> {
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub(crate) fn rot_z_cs(c: f64, s: f64) -> Matrix3<f64> {
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Angles `(a, b, c)` such that `r = Rx(a) · Ry(b) · Rz(c)`.
///
/// Well defined away from `|b| = 90°`, which the small residuals this is
/// used for never approach.
pub fn euler_xyz(r: &Matrix3<f64>) -> Vector3<f64> {
    let b = r[(0, 2)].clamp(-1.0, 1.0).asin();
    let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
    let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
    Vector3::new(a, b, c)
}

/// Rotation angle of `r` in radians.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// How a transform acts on a cloud.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ApplyMode {
    /// `p ↦ R p + t`
    Standard,
    /// `p ↦ R (p − μ) + μ + t`
    Disentangled(Vector3<f64>),
}

#[derive(Clone, Copy, Debug)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    chain: u32,
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
            chain: 0,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_rotation(rotation: Matrix3<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), translation)
    }

    /// Number of products accumulated since the last re-orthonormalization.
    pub fn chain_length(&self) -> u32 {
        self.chain
    }

    /// Wraps a product result, re-projecting the rotation once the chain gets long.
    pub(crate) fn chained(rotation: Matrix3<f64>, translation: Vector3<f64>, chain: u32) -> Self {
        if chain > REORTHONORMALIZE_AFTER {
            Self::new(project_to_so3(&rotation), translation)
        } else {
            Self {
                rotation,
                translation,
                chain,
            }
        }
    }

    /// `self · other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self::chained(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
            self.chain.max(other.chain) + 1,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
            chain: self.chain,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn reorthonormalized(&self) -> RigidTransform {
        Self::new(project_to_so3(&self.rotation), self.translation)
    }

    pub fn transform_point(&self, p: &Point) -> Point {
        self.rotation * p + self.translation
    }

    pub fn apply_point(&self, p: &Point, mode: ApplyMode) -> Point {
        match mode {
            ApplyMode::Standard => self.rotation * p + self.translation,
            ApplyMode::Disentangled(mu) => self.rotation * (p - mu) + mu + self.translation,
        }
    }

    pub fn apply(&self, cloud: &PointCloud, mode: ApplyMode) -> PointCloud {
        cloud.map_points(|p| self.apply_point(p, mode))
    }

    /// Re-expresses a disentangled transform (about centroid `mu`) in the standard convention.
    pub fn disentangled_to_standard(&self, mu: &Vector3<f64>) -> RigidTransform {
        RigidTransform::new(self.rotation, self.translation + mu - self.rotation * mu)
    }

    /// Inverse of [`RigidTransform::disentangled_to_standard`].
    pub fn standard_to_disentangled(&self, mu: &Vector3<f64>) -> RigidTransform {
        RigidTransform::new(self.rotation, self.translation - mu + self.rotation * mu)
    }

    pub fn approx_eq(&self, other: &RigidTransform, tol: f64) -> bool {
        (self.rotation - other.rotation).amax() <= tol && (self.translation - other.translation).amax() <= tol
    }

    /// Largest elementwise deviation of `RᵀR` from identity, and `|det R − 1|`.
    pub fn orthonormality_error(&self) -> (f64, f64) {
        let gram = self.rotation.transpose() * self.rotation - Matrix3::identity();
        (gram.amax(), (self.rotation.determinant() - 1.0).abs())
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl std::ops::Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// First-order perturbation `I ± t e_j^` for axis `j` in 1..=6.
///
/// The rotation block is projected to the nearest rotation, so the result is
/// a proper rigid transform that matches `exp(±t e_j^)` to `O(t²)`.
pub fn perturbation(j: usize, t: f64, sign: Sign) -> Result<RigidTransform> {
    let raw = Matrix4::identity() + wedge(&Twist::axis(j, sign.value() * t)?);
    let rotation: Matrix3<f64> = raw.fixed_view::<3, 3>(0, 0).into_owned();
    let translation: Vector3<f64> = raw.fixed_view::<3, 1>(0, 3).into_owned();
    Ok(RigidTransform::new(project_to_so3(&rotation), translation))
}
