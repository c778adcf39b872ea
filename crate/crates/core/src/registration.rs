//! Alignment of LiDAR points against a signed distance field.
//!
//! Semi-coupled mode solves a robust least-squares problem for the pose and
//! feeds the result to the filter as a pose observation. Tightly coupled
//! mode uses every point's SDF value as a scalar observation inside an
//! iterated error-state update.
//!
//! Both modes perturb rotations on the right, `R·Exp(δθ)`, so the rotation
//! block of a point row is `∂D(R·Exp(δθ)·p + t)/∂δθ = −nᵀ·R·p^∧`.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector, Matrix6, RowSVector, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eskf::{
    apply_gain, difference, inject, kalman_update, reset, woodbury_gain, ErrorBelief, NominalState, StateVector, DIM, IDX_P,
    IDX_THETA,
};
use crate::geometry::{exp_so3, hat, left_jacobian_inv, log_so3_unchecked, Pose, Vec3};
use crate::neural_map::SdfField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeasurementNoise {
    /// Standard deviation of a single SDF residual (m).
    pub sigma_sdf: f64,
    pub sigma_pose_t: f64,
    pub sigma_pose_r: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self {
            sigma_sdf: 0.1,
            sigma_pose_t: 0.05,
            sigma_pose_r: 0.01,
        }
    }
}

impl MeasurementNoise {
    pub fn validate(&self) -> Result<()> {
        if [self.sigma_sdf, self.sigma_pose_t, self.sigma_pose_r].iter().all(|&s| s > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("measurement noise must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    /// Voxel edge for downsampling the registration points (m).
    pub voxel_size: f64,
    pub max_points: usize,
    /// Geman-McClure scale (m).
    pub kernel_scale: f64,
    /// Points whose |sdf| exceeds this are not used as observations (m).
    pub gate: f64,
    pub min_inliers: usize,
    pub lm_lambda: f64,
    pub lm_max_iterations: usize,
    pub lm_tolerance: f64,
    pub tight_max_iterations: usize,
    pub tight_tolerance: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            voxel_size: 0.4,
            max_points: 500,
            kernel_scale: 0.1,
            gate: 1.0,
            min_inliers: 30,
            lm_lambda: 1e-4,
            lm_max_iterations: 30,
            lm_tolerance: 1e-6,
            tight_max_iterations: 5,
            tight_tolerance: 1e-4,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.voxel_size > 0.0
            && self.max_points > 0
            && self.kernel_scale > 0.0
            && self.gate > 0.0
            && self.lm_lambda > 0.0
            && self.lm_max_iterations > 0
            && self.lm_tolerance > 0.0
            && self.tight_max_iterations > 0
            && self.tight_tolerance > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid registration configuration: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub pose: Pose,
    pub converged: bool,
    pub iterations: usize,
    pub final_cost: f64,
    pub inlier_count: usize,
    /// Ordered (translation, rotation).
    pub pose_covariance: Matrix6<f64>,
}

/// Geman-McClure weight `s⁴ / (s² + r²)²`.
pub fn robust_weight(residual: f64, kernel_scale: f64) -> f64 {
    let s2 = kernel_scale * kernel_scale;
    let d = s2 + residual * residual;
    s2 * s2 / (d * d)
}

/// Geman-McClure cost `½·s²·r² / (s² + r²)`, whose IRLS weight is
/// [`robust_weight`]. Bounded by `½·s²`.
pub fn robust_cost(residual: f64, kernel_scale: f64) -> f64 {
    let s2 = kernel_scale * kernel_scale;
    let r2 = residual * residual;
    0.5 * s2 * r2 / (s2 + r2)
}

/// Voxel-grid downsampling keeping the first point of each voxel in input
/// order, then an even stride if the result still exceeds `max_points`.
pub fn select_registration_points(points: &[Vec3], voxel_size: f64, max_points: usize) -> Vec<Vec3> {
    let mut seen = HashSet::with_capacity(points.len());
    let mut kept: Vec<Vec3> = points
        .iter()
        .filter(|p| p.iter().all(|x| x.is_finite()))
        .filter(|p| seen.insert(voxel_key(p, voxel_size)))
        .copied()
        .collect();
    if kept.len() > max_points {
        let n = kept.len();
        kept = (0..max_points).map(|i| kept[i * n / max_points]).collect();
    }
    kept
}

pub fn voxel_key(p: &Vec3, voxel_size: f64) -> (i64, i64, i64) {
    let k = |x: f64| (x / voxel_size).floor() as i64;
    (k(p.x), k(p.y), k(p.z))
}

/// Row of `∂D(T·p)/∂(δt, δθ)` with `T = (R·Exp(δθ), t + δt)`.
pub fn pose_jacobian_row(rotation: &nalgebra::Matrix3<f64>, p_body: &Vec3, gradient: &Vec3) -> Vector6<f64> {
    let rot = -(gradient.transpose() * rotation * hat(p_body));
    Vector6::new(gradient.x, gradient.y, gradient.z, rot[0], rot[1], rot[2])
}

/// Observation row of one point's SDF with respect to the 18-dim error state.
///
/// Only the position and rotation blocks are non-zero. A form with
/// `+nᵀ·R·p^∧·J_r⁻¹(R)` in the rotation block also circulates; under the
/// right perturbation used here the derivative is `−nᵀ·R·p^∧`, which is what
/// the finite-difference tests check.
pub fn tight_jacobian_row(state: &NominalState, p_body: &Vec3, gradient: &Vec3) -> RowSVector<f64, DIM> {
    let j = pose_jacobian_row(&state.rotation, p_body, gradient);
    let mut row = RowSVector::<f64, DIM>::zeros();
    for k in 0..3 {
        row[IDX_P + k] = j[k];
        row[IDX_THETA + k] = j[3 + k];
    }
    row
}

/// Robust cost of a pose and the number of valid field samples. Invalid
/// samples are charged the kernel's upper bound.
pub fn registration_cost<F: SdfField + ?Sized>(field: &F, points: &[Vec3], pose: &Pose, kernel_scale: f64) -> (f64, usize) {
    let mut cost = 0.0;
    let mut inliers = 0;
    for p in points {
        match field.value(&pose.transform(p)) {
            Some(sdf) => {
                cost += robust_cost(sdf, kernel_scale);
                inliers += 1;
            }
            None => cost += 0.5 * kernel_scale * kernel_scale,
        }
    }
    (cost, inliers)
}

struct NormalEquations {
    a: Matrix6<f64>,
    b: Vector6<f64>,
    cost: f64,
    inliers: usize,
}

fn normal_equations<F: SdfField + ?Sized>(field: &F, points: &[Vec3], pose: &Pose, scale: f64) -> NormalEquations {
    let mut eq = NormalEquations {
        a: Matrix6::zeros(),
        b: Vector6::zeros(),
        cost: 0.0,
        inliers: 0,
    };
    for p in points {
        let s = field.sample(&pose.transform(p));
        if !s.valid {
            eq.cost += 0.5 * scale * scale;
            continue;
        }
        eq.inliers += 1;
        eq.cost += robust_cost(s.sdf, scale);
        let w = robust_weight(s.sdf, scale);
        let j = pose_jacobian_row(&pose.rotation, p, &s.gradient);
        eq.a += j * j.transpose() * w;
        eq.b += j * (w * s.sdf);
    }
    eq
}

fn retract(pose: &Pose, step: &Vector6<f64>) -> Pose {
    Pose {
        rotation: pose.rotation * exp_so3(&Vec3::new(step[3], step[4], step[5])),
        translation: pose.translation + Vec3::new(step[0], step[1], step[2]),
    }
}

/// Levenberg–Marquardt alignment of body-frame `points` to the zero level
/// set of `field`, starting from `init`.
pub fn register_semi<F: SdfField + ?Sized>(
    points: &[Vec3],
    init: &Pose,
    field: &F,
    config: &RegistrationConfig,
    noise: &MeasurementNoise,
) -> Result<RegistrationResult> {
    if !init.is_valid() {
        return Err(Error::InvalidArgument("initial pose is not finite".into()));
    }
    let scale = config.kernel_scale;
    let mut pose = *init;
    let mut eq = normal_equations(field, points, &pose, scale);
    if eq.inliers < config.min_inliers {
        return Err(Error::RegistrationFailed {
            inliers: eq.inliers,
            required: config.min_inliers,
        });
    }
    let mut lambda = config.lm_lambda;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.lm_max_iterations {
        iterations += 1;
        let mut damped = eq.a;
        for k in 0..6 {
            damped[(k, k)] += lambda * (eq.a[(k, k)] + 1e-9);
        }
        let Some(step) = damped.cholesky().map(|c| -c.solve(&eq.b)) else {
            lambda *= 10.0;
            continue;
        };
        if step.norm() < config.lm_tolerance {
            converged = true;
            break;
        }
        let candidate = retract(&pose, &step);
        let next = normal_equations(field, points, &candidate, scale);
        if next.cost < eq.cost && next.inliers >= config.min_inliers {
            pose = candidate;
            eq = next;
            lambda *= 0.5;
        } else {
            lambda *= 10.0;
            if lambda > 1e12 {
                // No descent direction left at numerical precision.
                converged = true;
                break;
            }
        }
    }
    pose = pose.normalized();
    let pose_covariance = eq
        .a
        .try_inverse()
        .map(|inv| inv * noise.sigma_sdf.powi(2))
        .unwrap_or_else(|| Matrix6::identity() * 1e6);
    Ok(RegistrationResult {
        pose,
        converged,
        iterations,
        final_cost: eq.cost,
        inlier_count: eq.inliers,
        pose_covariance,
    })
}

/// Filter update with the registered pose as a direct observation of
/// position and attitude.
pub fn update_semi(
    state: &NominalState,
    belief: &ErrorBelief,
    reg: &RegistrationResult,
    noise: &MeasurementNoise,
) -> Result<(NominalState, ErrorBelief)> {
    if !reg.converged {
        return Ok((*state, *belief));
    }
    let r_pos = reg.pose.translation - state.position;
    let r_rot = log_so3_unchecked(&(state.rotation.transpose() * reg.pose.rotation));
    let mut residual = DVector::zeros(6);
    residual.fixed_rows_mut::<3>(0).copy_from(&r_pos);
    residual.fixed_rows_mut::<3>(3).copy_from(&r_rot);

    // Log(Exp(−δθ)·Exp(r)) ≈ r − J_l⁻¹(r)·δθ
    let mut h = DMatrix::zeros(6, DIM);
    h.view_mut((0, IDX_P), (3, 3)).copy_from(&nalgebra::Matrix3::identity());
    h.view_mut((3, IDX_THETA), (3, 3)).copy_from(&left_jacobian_inv(&r_rot));

    let mut v = DMatrix::zeros(6, 6);
    for k in 0..3 {
        v[(k, k)] = noise.sigma_pose_t.powi(2);
        v[(k + 3, k + 3)] = noise.sigma_pose_r.powi(2);
    }
    let post = kalman_update(belief, &h, &residual, &v)?;
    let state = inject(state, &post.delta);
    Ok((state, reset(&post)))
}

#[derive(Debug, Clone)]
pub struct TightOutcome {
    pub state: NominalState,
    pub belief: ErrorBelief,
    pub result: RegistrationResult,
    /// Too few valid observations: the prediction was passed through.
    pub degraded: bool,
    /// Dimension of the system inverted by the last gain computation.
    pub inverted_dim: usize,
}

struct PointRows {
    h: DMatrix<f64>,
    residual: DVector<f64>,
    variance: DVector<f64>,
    cost: f64,
}

fn point_rows<F: SdfField + ?Sized>(
    field: &F,
    points: &[Vec3],
    state: &NominalState,
    config: &RegistrationConfig,
    noise: &MeasurementNoise,
) -> PointRows {
    let pose = state.pose();
    let mut rows = Vec::new();
    let mut residual = Vec::new();
    let mut variance = Vec::new();
    let mut cost = 0.0;
    let s2 = noise.sigma_sdf.powi(2);
    for p in points {
        let s = field.sample(&pose.transform(p));
        if !s.valid || s.sdf.abs() > config.gate {
            cost += 0.5 * config.kernel_scale.powi(2);
            continue;
        }
        cost += robust_cost(s.sdf, config.kernel_scale);
        rows.push(tight_jacobian_row(state, p, &s.gradient));
        residual.push(-s.sdf);
        variance.push(s2 / robust_weight(s.sdf, config.kernel_scale));
    }
    PointRows {
        h: DMatrix::from_fn(rows.len(), DIM, |i, j| rows[i][j]),
        residual: DVector::from_vec(residual),
        variance: DVector::from_vec(variance),
        cost,
    }
}

/// Iterated error-state update with one SDF observation per point.
pub fn update_tight<F: SdfField + ?Sized>(
    points: &[Vec3],
    state: &NominalState,
    belief: &ErrorBelief,
    field: &F,
    noise: &MeasurementNoise,
    config: &RegistrationConfig,
) -> Result<TightOutcome> {
    let prior = *state;
    let mut current = prior;
    let mut cov = belief.cov;
    let mut converged = false;
    let mut iterations = 0;
    let mut inverted_dim = 0;
    let mut inliers = 0;
    let mut final_cost = 0.0;

    while iterations < config.tight_max_iterations {
        let rows = point_rows(field, points, &current, config, noise);
        if iterations == 0 && rows.residual.len() < config.min_inliers {
            return Ok(TightOutcome {
                state: prior,
                belief: *belief,
                result: RegistrationResult {
                    pose: prior.pose(),
                    converged: false,
                    iterations: 0,
                    final_cost: rows.cost,
                    inlier_count: rows.residual.len(),
                    pose_covariance: belief.pose_covariance(),
                },
                degraded: true,
                inverted_dim: 0,
            });
        }
        if rows.residual.is_empty() {
            break;
        }
        iterations += 1;
        inliers = rows.residual.len();
        // Linearized about the current iterate: the update is relative to the
        // prior, so the prior offset enters the residual.
        let offset = difference(&current, &prior);
        let shifted = &rows.residual + &rows.h * DVector::from_column_slice(offset.as_slice());
        let gain = woodbury_gain(&belief.cov, &rows.h, &rows.variance)?;
        inverted_dim = gain.inverted_dim;
        let post = apply_gain(belief, &gain.gain, &rows.h, &shifted);
        let step: StateVector = post.delta - offset;
        current = inject(&current, &step);
        cov = post.cov;
        final_cost = rows.cost;
        if step.norm() < config.tight_tolerance {
            converged = true;
            break;
        }
    }

    let total = difference(&current, &prior);
    let belief = reset(&ErrorBelief { delta: total, cov });
    Ok(TightOutcome {
        state: current,
        result: RegistrationResult {
            pose: current.pose(),
            converged,
            iterations,
            final_cost,
            inlier_count: inliers,
            pose_covariance: belief.pose_covariance(),
        },
        belief,
        degraded: false,
        inverted_dim,
    })
}

#[cfg(test)]
mod tests;
