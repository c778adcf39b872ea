//! Rotation-group and rigid-transform primitives.
//!
//! Rotations are plain 3×3 matrices. Tangent vectors are axis-angle
//! vectors in R³; perturbations are applied on the right (`R·Exp(δθ)`)
//! throughout the crate.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this angle (rad) the closed forms switch to their Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// Tolerance on `‖RᵀR − I‖` when a matrix is checked for being a rotation.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Skew-symmetric matrix with `hat(v) * w == v.cross(&w)`.
pub fn hat(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`] (reads the antisymmetric part).
pub fn vee(m: &Mat3) -> Vec3 {
    Vec3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

pub fn is_rotation(r: &Mat3) -> bool {
    r.iter().all(|x| x.is_finite())
        && (r.transpose() * r - Mat3::identity()).norm() < ROTATION_TOLERANCE
        && r.determinant() > 0.0
}

/// Rodrigues' formula.
pub fn exp_so3(theta: &Vec3) -> Mat3 {
    let angle2 = theta.norm_squared();
    let angle = angle2.sqrt();
    let k = hat(theta);
    let (a, b) = if angle < SMALL_ANGLE {
        (
            1.0 - angle2 / 6.0 + angle2 * angle2 / 120.0,
            0.5 - angle2 / 24.0 + angle2 * angle2 / 720.0,
        )
    } else {
        (angle.sin() / angle, (1.0 - angle.cos()) / angle2)
    };
    Mat3::identity() + k * a + k * k * b
}

/// Principal logarithm; the result has norm in `[0, π]`.
pub fn log_so3(r: &Mat3) -> Result<Vec3> {
    if !is_rotation(r) {
        return Err(Error::NotARotation);
    }
    Ok(log_so3_unchecked(r))
}

pub(crate) fn log_so3_unchecked(r: &Mat3) -> Vec3 {
    let axis_sin = vee(r); // sin(θ)·a
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let sin = axis_sin.norm();
    let angle = sin.atan2(cos);

    if angle < SMALL_ANGLE {
        // θ/sinθ ≈ 1 + θ²/6
        return axis_sin * (1.0 + sin * sin / 6.0);
    }
    if cos > -0.99 {
        return axis_sin * (angle / sin);
    }

    // Near π the antisymmetric part vanishes; read the axis from the
    // symmetric part B = (R + Rᵀ)/4 + I/2 = c₀·I + c₁·aaᵀ.
    let sym = (r + r.transpose()) * 0.25 + Mat3::identity() * 0.5;
    let c0 = 0.5 * (1.0 + cos);
    let c1 = 0.5 * (1.0 - cos);
    let k = (0..3)
        .max_by(|&i, &j| sym[(i, i)].total_cmp(&sym[(j, j)]))
        .unwrap_or(0);
    let ak = ((sym[(k, k)] - c0) / c1).max(0.0).sqrt();
    let mut axis = Vec3::zeros();
    for j in 0..3 {
        axis[j] = if j == k { ak } else { sym[(j, k)] / (c1 * ak) };
    }
    axis.normalize_mut();
    if axis.dot(&axis_sin) < 0.0 {
        axis = -axis;
    }
    axis * angle
}

/// Right Jacobian of SO(3): `Exp(θ + δ) ≈ Exp(θ)·Exp(J_r(θ)·δ)`.
pub fn right_jacobian(theta: &Vec3) -> Mat3 {
    let angle2 = theta.norm_squared();
    let angle = angle2.sqrt();
    let k = hat(theta);
    let (a, b) = if angle < SMALL_ANGLE {
        (
            0.5 - angle2 / 24.0 + angle2 * angle2 / 720.0,
            1.0 / 6.0 - angle2 / 120.0 + angle2 * angle2 / 5040.0,
        )
    } else {
        (
            (1.0 - angle.cos()) / angle2,
            (angle - angle.sin()) / (angle2 * angle),
        )
    };
    Mat3::identity() - k * a + k * k * b
}

/// `J_r⁻¹(θ) = I + ½θ^∧ + (1/‖θ‖² − (1 + cos‖θ‖)/(2‖θ‖ sin‖θ‖))·(θ^∧)²`.
pub fn right_jacobian_inv(theta: &Vec3) -> Mat3 {
    let angle2 = theta.norm_squared();
    let angle = angle2.sqrt();
    let k = hat(theta);
    let c = if angle < SMALL_ANGLE {
        1.0 / 12.0 + angle2 / 720.0 + angle2 * angle2 / 30240.0
    } else {
        1.0 / angle2 - (1.0 + angle.cos()) / (2.0 * angle * angle.sin())
    };
    Mat3::identity() + k * 0.5 + k * k * c
}

/// Left Jacobian; equals `J_r(θ)ᵀ`.
pub fn left_jacobian(theta: &Vec3) -> Mat3 {
    right_jacobian(&-theta)
}

pub fn left_jacobian_inv(theta: &Vec3) -> Mat3 {
    right_jacobian_inv(&-theta)
}

/// Rigid transform `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Mat3::identity(), Vec3::zeros())
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self::new(Mat3::identity(), translation)
    }

    pub fn transform(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self::new(rt, -(rt * self.translation))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn is_valid(&self) -> bool {
        is_rotation(&self.rotation) && self.translation.iter().all(|x| x.is_finite())
    }

    /// Re-orthonormalize the rotation (polar projection via SVD).
    pub fn normalized(&self) -> Self {
        Self::new(orthonormalize(&self.rotation), self.translation)
    }
}

/// Nearest rotation matrix in the Frobenius sense.
pub fn orthonormalize(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return *m,
    };
    let mut s = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    u * s * vt
}

/// Translation linear in `alpha`, rotation along the geodesic from `a` to `b`.
pub fn interpolate_pose(a: &Pose, b: &Pose, alpha: f64) -> Pose {
    let delta = log_so3_unchecked(&(a.rotation.transpose() * b.rotation));
    Pose::new(
        a.rotation * exp_so3(&(delta * alpha)),
        a.translation + (b.translation - a.translation) * alpha,
    )
}

/// Result of a least-squares alignment `reference ≈ s·R·estimated + t`.
#[derive(Debug, Clone, Copy)]
pub struct Alignment {
    pub pose: Pose,
    pub scale: f64,
    pub rmse: f64,
}

impl Alignment {
    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.pose.rotation * x * self.scale + self.pose.translation
    }
}

/// Closed-form least-squares alignment of corresponded point sets
/// (rigid when `with_scale` is false).
pub fn umeyama_align(estimated: &[Vec3], reference: &[Vec3], with_scale: bool) -> Result<Alignment> {
    let n = estimated.len();
    if n != reference.len() {
        return Err(Error::LengthMismatch {
            left: n,
            right: reference.len(),
        });
    }
    if n < 3 {
        return Err(Error::Degenerate(format!(
            "alignment needs at least 3 correspondences, got {n}"
        )));
    }
    let inv_n = 1.0 / n as f64;
    let mean_e = estimated.iter().sum::<Vec3>() * inv_n;
    let mean_r = reference.iter().sum::<Vec3>() * inv_n;

    let mut cross = Mat3::zeros();
    let mut spread_r = Mat3::zeros();
    let mut var_e = 0.0;
    for (e, r) in estimated.iter().zip(reference) {
        let de = e - mean_e;
        let dr = r - mean_r;
        cross += dr * de.transpose();
        spread_r += dr * dr.transpose();
        var_e += de.norm_squared();
    }
    cross *= inv_n;
    spread_r *= inv_n;
    var_e *= inv_n;

    let sv_ref = spread_r.symmetric_eigenvalues();
    let mut sv_ref: Vec<f64> = sv_ref.iter().copied().collect();
    sv_ref.sort_by(|a, b| b.total_cmp(a));
    if sv_ref[0] <= 1e-24 || sv_ref[1] <= 1e-12 * sv_ref[0] {
        return Err(Error::Degenerate(
            "reference points are coincident or collinear".into(),
        ));
    }

    let svd = cross.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Degenerate("SVD failed".into())),
    };
    let sv = svd.singular_values;
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(Error::Degenerate(
            "cross-covariance has rank below 2".into(),
        ));
    }
    let mut s = Mat3::identity();
    if u.determinant() * vt.determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * vt;
    let scale = if with_scale {
        (sv[0] * s[(0, 0)] + sv[1] * s[(1, 1)] + sv[2] * s[(2, 2)]) / var_e
    } else {
        1.0
    };
    let translation = mean_r - rotation * mean_e * scale;
    let mut alignment = Alignment {
        pose: Pose::new(rotation, translation),
        scale,
        rmse: 0.0,
    };
    let sse: f64 = estimated
        .iter()
        .zip(reference)
        .map(|(e, r)| (alignment.apply(e) - r).norm_squared())
        .sum();
    alignment.rmse = (sse * inv_n).sqrt();
    Ok(alignment)
}
