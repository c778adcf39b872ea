//! Error-state Kalman filter on SO(3) × R¹⁵.
//!
//! Error-state layout (18 entries):
//! ```text
//!  [0..3]   δp    position (m, world)
//!  [3..6]   δv    velocity (m/s, world)
//!  [6..9]   δθ    rotation error, R_true = R·Exp(δθ)
//!  [9..12]  δb_g  gyroscope bias (rad/s, body)
//!  [12..15] δb_a  accelerometer bias (m/s², body)
//!  [15..18] δg    gravity (m/s², world)
//! ```

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, hat, right_jacobian, Mat3, Pose, Vec3};

pub const DIM: usize = 18;
pub const IDX_P: usize = 0;
pub const IDX_V: usize = 3;
pub const IDX_THETA: usize = 6;
pub const IDX_BG: usize = 9;
pub const IDX_BA: usize = 12;
pub const IDX_G: usize = 15;

pub type StateVector = SVector<f64, DIM>;
pub type StateMatrix = SMatrix<f64, DIM, DIM>;

/// Regularization added to a near-singular covariance before the single retry.
const COVARIANCE_JITTER: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NominalState {
    pub position: Vec3,
    pub velocity: Vec3,
    /// Body to world.
    pub rotation: Mat3,
    pub bias_gyro: Vec3,
    pub bias_accel: Vec3,
    pub gravity: Vec3,
}

impl NominalState {
    pub fn at_rest(rotation: Mat3, gravity_magnitude: f64) -> Self {
        Self {
            position: Vec3::zeros(),
            velocity: Vec3::zeros(),
            rotation,
            bias_gyro: Vec3::zeros(),
            bias_accel: Vec3::zeros(),
            gravity: Vec3::new(0.0, 0.0, -gravity_magnitude),
        }
    }

    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBelief {
    pub delta: StateVector,
    pub cov: StateMatrix,
}

impl ErrorBelief {
    pub fn new(cov: StateMatrix) -> Self {
        Self {
            delta: StateVector::zeros(),
            cov,
        }
    }

    /// Marginal covariance of (δp, δθ).
    pub fn pose_covariance(&self) -> Matrix6<f64> {
        let mut out = Matrix6::zeros();
        let idx = [IDX_P, IDX_THETA];
        for (bi, &i) in idx.iter().enumerate() {
            for (bj, &j) in idx.iter().enumerate() {
                out.fixed_view_mut::<3, 3>(3 * bi, 3 * bj)
                    .copy_from(&self.cov.fixed_view::<3, 3>(i, j));
            }
        }
        out
    }

    pub fn is_symmetric_psd(&self, tol: f64) -> bool {
        if (self.cov - self.cov.transpose()).norm() >= tol {
            return false;
        }
        self.cov
            .symmetric_eigenvalues()
            .iter()
            .all(|&e| e > -tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// rad/s, body frame.
    pub omega: Vec3,
    /// m/s², body frame (specific force).
    pub accel: Vec3,
}

impl ImuSample {
    pub fn is_finite(&self) -> bool {
        self.t.is_finite()
            && self.omega.iter().all(|x| x.is_finite())
            && self.accel.iter().all(|x| x.is_finite())
    }
}

/// Continuous-time noise densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Accelerometer white noise, m/s²/√Hz.
    pub sigma_accel: f64,
    /// Gyroscope white noise, rad/s/√Hz.
    pub sigma_gyro: f64,
    /// Accelerometer bias random walk, m/s³/√Hz.
    pub sigma_bias_accel: f64,
    /// Gyroscope bias random walk, rad/s²/√Hz.
    pub sigma_bias_gyro: f64,
    pub gravity_magnitude: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma_accel: 0.02,
            sigma_gyro: 0.002,
            sigma_bias_accel: 1e-3,
            sigma_bias_gyro: 1e-4,
            gravity_magnitude: 9.81,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_accel,
            self.sigma_gyro,
            self.sigma_bias_accel,
            self.sigma_bias_gyro,
            self.gravity_magnitude,
        ];
        if all.iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "noise densities must be strictly positive: {self:?}"
            )))
        }
    }
}

/// Standard deviations of the initial error covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialPriors {
    pub sigma_position: f64,
    pub sigma_velocity: f64,
    pub sigma_rotation: f64,
    pub sigma_bias_gyro: f64,
    pub sigma_bias_accel: f64,
    pub sigma_gravity: f64,
    /// Upper bound on the trace of the accelerometer sample covariance
    /// during static initialization, (m/s²)².
    pub max_static_accel_variance: f64,
}

impl Default for InitialPriors {
    fn default() -> Self {
        Self {
            sigma_position: 1e-3,
            sigma_velocity: 1e-2,
            sigma_rotation: 1e-2,
            sigma_bias_gyro: 1e-3,
            sigma_bias_accel: 5e-2,
            sigma_gravity: 1e-2,
            max_static_accel_variance: 0.5,
        }
    }
}

impl InitialPriors {
    pub fn covariance(&self) -> StateMatrix {
        let sig = [
            self.sigma_position,
            self.sigma_velocity,
            self.sigma_rotation,
            self.sigma_bias_gyro,
            self.sigma_bias_accel,
            self.sigma_gravity,
        ];
        let mut diag = StateVector::zeros();
        for (block, s) in sig.iter().enumerate() {
            for k in 0..3 {
                diag[3 * block + k] = s * s;
            }
        }
        StateMatrix::from_diagonal(&diag)
    }
}

fn check_step(imu: &ImuSample, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= 0.1) {
        return Err(Error::InvalidArgument(format!(
            "propagation step {dt} s outside (0, 0.1]"
        )));
    }
    if !imu.is_finite() {
        return Err(Error::InvalidArgument("non-finite IMU sample".into()));
    }
    Ok(())
}

/// Discrete nominal kinematics with the reading held over `dt`.
pub fn propagate_nominal(state: &NominalState, imu: &ImuSample, dt: f64) -> NominalState {
    let acc_world = state.rotation * (imu.accel - state.bias_accel) + state.gravity;
    let omega = imu.omega - state.bias_gyro;
    NominalState {
        position: state.position + state.velocity * dt + acc_world * (0.5 * dt * dt),
        velocity: state.velocity + acc_world * dt,
        rotation: state.rotation * exp_so3(&(omega * dt)),
        ..*state
    }
}

/// Error-state transition `F` and process noise `Q` for one step.
///
/// `F` is the exact Jacobian of [`propagate_nominal`] with respect to the
/// error coordinates, so it also carries the second-order `dt²` couplings
/// into δp.
pub fn build_transition(
    state: &NominalState,
    imu: &ImuSample,
    dt: f64,
    noise: &NoiseConfig,
) -> Result<(StateMatrix, StateMatrix)> {
    check_step(imu, dt)?;
    let r = state.rotation;
    let acc_body = imu.accel - state.bias_accel;
    let omega_dt = (imu.omega - state.bias_gyro) * dt;
    let half_dt2 = 0.5 * dt * dt;
    let i3 = Mat3::identity();
    let r_acc_hat = r * hat(&acc_body);

    let mut f = StateMatrix::identity();
    let mut set = |row: usize, col: usize, m: Mat3| {
        f.fixed_view_mut::<3, 3>(row, col).copy_from(&m);
    };
    set(IDX_P, IDX_V, i3 * dt);
    set(IDX_P, IDX_THETA, -r_acc_hat * half_dt2);
    set(IDX_P, IDX_BA, -r * half_dt2);
    set(IDX_P, IDX_G, i3 * half_dt2);
    set(IDX_V, IDX_THETA, -r_acc_hat * dt);
    set(IDX_V, IDX_BA, -r * dt);
    set(IDX_V, IDX_G, i3 * dt);
    set(IDX_THETA, IDX_THETA, exp_so3(&-omega_dt));
    set(IDX_THETA, IDX_BG, -right_jacobian(&omega_dt) * dt);

    let mut q = StateVector::zeros();
    let densities = [
        (IDX_V, noise.sigma_accel),
        (IDX_THETA, noise.sigma_gyro),
        (IDX_BG, noise.sigma_bias_gyro),
        (IDX_BA, noise.sigma_bias_accel),
    ];
    for (idx, sigma) in densities {
        for k in 0..3 {
            q[idx + k] = sigma * sigma * dt;
        }
    }
    Ok((f, StateMatrix::from_diagonal(&q)))
}

/// One IMU step: nominal state forward, `P ← F·P·Fᵀ + Q`.
pub fn propagate(
    state: &NominalState,
    belief: &ErrorBelief,
    imu: &ImuSample,
    dt: f64,
    noise: &NoiseConfig,
) -> Result<(NominalState, ErrorBelief)> {
    let (f, q) = build_transition(state, imu, dt, noise)?;
    let cov = f * belief.cov * f.transpose() + q;
    Ok((
        propagate_nominal(state, imu, dt),
        ErrorBelief {
            delta: StateVector::zeros(),
            cov: symmetrize(&cov),
        },
    ))
}

fn symmetrize(m: &StateMatrix) -> StateMatrix {
    (m + m.transpose()) * 0.5
}

fn check_measurement(h: &DMatrix<f64>, residual: &DVector<f64>, v_rows: usize) -> Result<()> {
    if h.ncols() != DIM {
        return Err(Error::Dimension {
            expected: DIM,
            got: h.ncols(),
        });
    }
    if residual.len() != h.nrows() || v_rows != h.nrows() {
        return Err(Error::Dimension {
            expected: h.nrows(),
            got: residual.len().min(v_rows),
        });
    }
    Ok(())
}

/// `K = P·Hᵀ·(H·P·Hᵀ + V)⁻¹`; inverts an m×m innovation matrix.
pub fn standard_gain(cov: &StateMatrix, h: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = DMatrix::from_column_slice(DIM, DIM, cov.as_slice());
    let pht = &p * h.transpose();
    let innovation = h * &pht + v;
    let chol = innovation
        .cholesky()
        .ok_or_else(|| Error::Numerical("innovation matrix is not positive definite".into()))?;
    // K = P Hᵀ S⁻¹  ⇔  S Kᵀ = H P
    Ok(chol.solve(&pht.transpose()).transpose())
}

/// Gain computed in information form, together with the dimension of the
/// system that was inverted.
#[derive(Debug, Clone)]
pub struct WoodburyGain {
    pub gain: DMatrix<f64>,
    pub inverted_dim: usize,
}

fn invert_spd(m: &StateMatrix) -> Option<StateMatrix> {
    m.cholesky().map(|c| c.inverse())
}

/// `K = (P⁻¹ + Hᵀ·V⁻¹·H)⁻¹·Hᵀ·V⁻¹` for diagonal `V`; only 18×18 systems
/// are inverted regardless of the number of rows in `H`.
pub fn woodbury_gain(cov: &StateMatrix, h: &DMatrix<f64>, v_diag: &DVector<f64>) -> Result<WoodburyGain> {
    if v_diag.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidArgument(
            "measurement variances must be positive".into(),
        ));
    }
    let p_inv = match invert_spd(cov) {
        Some(inv) => inv,
        None => invert_spd(&(cov + StateMatrix::identity() * COVARIANCE_JITTER))
            .ok_or_else(|| Error::Numerical("state covariance is singular".into()))?,
    };

    let mut info = p_inv;
    // Hᵀ·V⁻¹ as an 18×m matrix.
    let mut ht_vinv = h.transpose();
    for (j, &var) in v_diag.iter().enumerate() {
        ht_vinv.column_mut(j).scale_mut(1.0 / var);
    }
    for i in 0..h.nrows() {
        let w = 1.0 / v_diag[i];
        let row = h.row(i);
        for a in 0..DIM {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in 0..DIM {
                info[(a, b)] += w * ra * row[b];
            }
        }
    }
    let info_inv = invert_spd(&symmetrize(&info))
        .ok_or_else(|| Error::Numerical("information matrix is not positive definite".into()))?;
    let info_inv = DMatrix::from_column_slice(DIM, DIM, info_inv.as_slice());
    Ok(WoodburyGain {
        inverted_dim: info_inv.nrows(),
        gain: info_inv * ht_vinv,
    })
}

pub(crate) fn apply_gain(belief: &ErrorBelief, gain: &DMatrix<f64>, h: &DMatrix<f64>, residual: &DVector<f64>) -> ErrorBelief {
    let delta = gain * residual;
    let kh = gain * h;
    let kh = StateMatrix::from_column_slice(kh.as_slice());
    let cov = (StateMatrix::identity() - kh) * belief.cov;
    ErrorBelief {
        delta: StateVector::from_column_slice(delta.as_slice()),
        cov: symmetrize(&cov),
    }
}

/// Standard EKF update; `delta = K·residual`, `P ← (I − K·H)·P`.
pub fn kalman_update(
    belief: &ErrorBelief,
    h: &DMatrix<f64>,
    residual: &DVector<f64>,
    v: &DMatrix<f64>,
) -> Result<ErrorBelief> {
    check_measurement(h, residual, v.nrows())?;
    let gain = standard_gain(&belief.cov, h, v)?;
    Ok(apply_gain(belief, &gain, h, residual))
}

/// Same contract as [`kalman_update`] with the gain from [`woodbury_gain`].
pub fn woodbury_update(
    belief: &ErrorBelief,
    h: &DMatrix<f64>,
    residual: &DVector<f64>,
    v_diag: &DVector<f64>,
) -> Result<ErrorBelief> {
    check_measurement(h, residual, v_diag.len())?;
    let gain = woodbury_gain(&belief.cov, h, v_diag)?;
    Ok(apply_gain(belief, &gain.gain, h, residual))
}

/// `x ⊕ δx`: vector parts added, rotation perturbed on the right.
pub fn inject(state: &NominalState, delta: &StateVector) -> NominalState {
    let block = |i: usize| Vec3::new(delta[i], delta[i + 1], delta[i + 2]);
    NominalState {
        position: state.position + block(IDX_P),
        velocity: state.velocity + block(IDX_V),
        rotation: state.rotation * exp_so3(&block(IDX_THETA)),
        bias_gyro: state.bias_gyro + block(IDX_BG),
        bias_accel: state.bias_accel + block(IDX_BA),
        gravity: state.gravity + block(IDX_G),
    }
}

/// `x ⊟ y` with the same conventions as [`inject`]: `y ⊕ (x ⊟ y) = x`.
pub fn difference(x: &NominalState, y: &NominalState) -> StateVector {
    let mut d = StateVector::zeros();
    let mut put = |i: usize, v: Vec3| d.fixed_rows_mut::<3>(i).copy_from(&v);
    put(IDX_P, x.position - y.position);
    put(IDX_V, x.velocity - y.velocity);
    put(
        IDX_THETA,
        crate::geometry::log_so3_unchecked(&(y.rotation.transpose() * x.rotation)),
    );
    put(IDX_BG, x.bias_gyro - y.bias_gyro);
    put(IDX_BA, x.bias_accel - y.bias_accel);
    put(IDX_G, x.gravity - y.gravity);
    d
}

/// Zero the error state and move the covariance to the new reference point.
pub fn reset(belief: &ErrorBelief) -> ErrorBelief {
    let dtheta = Vec3::new(
        belief.delta[IDX_THETA],
        belief.delta[IDX_THETA + 1],
        belief.delta[IDX_THETA + 2],
    );
    let mut j = StateMatrix::identity();
    j.fixed_view_mut::<3, 3>(IDX_THETA, IDX_THETA)
        .copy_from(&(Mat3::identity() - hat(&dtheta) * 0.5));
    ErrorBelief {
        delta: StateVector::zeros(),
        cov: symmetrize(&(j * belief.cov * j.transpose())),
    }
}

/// Rotation with zero yaw that maps the body-frame "up" direction `up`
/// onto world +z.
pub fn level_rotation(up: &Vec3) -> Mat3 {
    let u = up.normalize();
    let roll = u.y.atan2(u.z);
    let pitch = (-u.x).atan2((u.y * u.y + u.z * u.z).sqrt());
    exp_so3(&Vec3::new(0.0, pitch, 0.0)) * exp_so3(&Vec3::new(roll, 0.0, 0.0))
}

/// Gravity-aligned initial state from a window of static IMU readings.
pub fn init_from_static(
    samples: &[ImuSample],
    noise: &NoiseConfig,
    priors: &InitialPriors,
) -> Result<(NominalState, ErrorBelief)> {
    const MIN_SAMPLES: usize = 50;
    if samples.len() < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "static initialization needs at least {MIN_SAMPLES} samples, got {}",
            samples.len()
        )));
    }
    if let Some(bad) = samples.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite IMU sample at t = {}",
            bad.t
        )));
    }
    let n = samples.len() as f64;
    let mean_acc = samples.iter().map(|s| s.accel).sum::<Vec3>() / n;
    let mean_gyro = samples.iter().map(|s| s.omega).sum::<Vec3>() / n;
    let variance = samples
        .iter()
        .map(|s| (s.accel - mean_acc).norm_squared())
        .sum::<f64>()
        / n;
    if variance > priors.max_static_accel_variance {
        return Err(Error::InitializationFailed {
            variance,
            threshold: priors.max_static_accel_variance,
        });
    }
    if mean_acc.norm() < 1e-6 {
        return Err(Error::Degenerate("mean acceleration is zero".into()));
    }

    let rotation = level_rotation(&mean_acc);
    let mut state = NominalState::at_rest(rotation, noise.gravity_magnitude);
    state.bias_accel = mean_acc + rotation.transpose() * state.gravity;
    state.bias_gyro = mean_gyro;
    Ok((state, ErrorBelief::new(priors.covariance())))
}
