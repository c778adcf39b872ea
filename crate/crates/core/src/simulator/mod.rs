//! Synthetic ground truth: analytic scenes, smooth trajectories, and the
//! IMU and LiDAR streams a platform moving through them would record.

mod scene;
mod trajectory;
pub mod scenarios;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use scene::{Primitive, Scene, HIT_TOLERANCE, MAX_TRACE_STEPS};
pub use trajectory::{ControlPose, KinematicState, TrajectorySpline};

use crate::error::{Error, Result};
use crate::eskf::{ImuSample, NominalState};
use crate::geometry::{exp_so3, log_so3_unchecked, Pose, Vec3};
use crate::preprocessing::{LidarFrame, LidarPoint, SensorId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImuSpec {
    pub rate: f64,
    /// White-noise densities (m/s²/√Hz, rad/s/√Hz).
    pub sigma_accel: f64,
    pub sigma_gyro: f64,
    /// Bias random-walk densities.
    pub sigma_bias_accel: f64,
    pub sigma_bias_gyro: f64,
    pub bias_gyro: [f64; 3],
    pub bias_accel: [f64; 3],
    pub gravity_magnitude: f64,
}

impl Default for ImuSpec {
    fn default() -> Self {
        Self {
            rate: 200.0,
            sigma_accel: 0.0,
            sigma_gyro: 0.0,
            sigma_bias_accel: 0.0,
            sigma_bias_gyro: 0.0,
            bias_gyro: [0.0; 3],
            bias_accel: [0.0; 3],
            gravity_magnitude: 9.81,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanPattern {
    pub rings: usize,
    pub points_per_ring: usize,
    pub vertical_fov_deg: f64,
    pub sweep_period: f64,
    pub max_range: f64,
    pub min_range: f64,
    /// Standard deviation of additive range noise (m).
    pub range_noise: f64,
}

impl Default for ScanPattern {
    fn default() -> Self {
        Self {
            rings: 16,
            points_per_ring: 180,
            vertical_fov_deg: 30.0,
            sweep_period: 0.1,
            max_range: 40.0,
            min_range: 0.3,
            range_noise: 0.0,
        }
    }
}

impl ScanPattern {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rings > 0
            && self.points_per_ring > 0
            && self.vertical_fov_deg > 0.0
            && self.vertical_fov_deg < 180.0
            && self.sweep_period > 0.0
            && self.max_range > self.min_range
            && self.min_range >= 0.0
            && self.range_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid scan pattern: {self:?}")))
        }
    }

    /// Unit beam direction in the sensor frame.
    pub fn direction(&self, ring: usize, column: usize) -> Vec3 {
        let fov = self.vertical_fov_deg.to_radians();
        let elevation = if self.rings == 1 {
            0.0
        } else {
            -0.5 * fov + fov * ring as f64 / (self.rings - 1) as f64
        };
        let azimuth = std::f64::consts::TAU * column as f64 / self.points_per_ring as f64;
        Vec3::new(
            elevation.cos() * azimuth.cos(),
            elevation.cos() * azimuth.sin(),
            elevation.sin(),
        )
    }
}

/// True platform state at an IMU sample time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub t: f64,
    pub state: NominalState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImuStream {
    pub samples: Vec<ImuSample>,
    pub truth: Vec<GroundTruth>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
        StandardNormal.sample(rng),
    )
}

/// IMU readings at `spec.rate` over `[t0, t1]`.
///
/// Each reading is the constant input that carries the true state at its
/// own time exactly to the true attitude and velocity at the next sample
/// under the filter's discrete kinematics: `ω̃ = Log(R_kᵀ·R_{k+1})/dt` and
/// `ã = R_kᵀ·((v_{k+1} − v_k)/dt − g)`, plus biases and noise. Over one
/// sample interval these equal the interval averages of the continuous
/// `vee(Rᵀ·Ṙ)` and `Rᵀ·(a − g)` to first order.
pub fn synth_imu(spline: &TrajectorySpline, t0: f64, t1: f64, spec: &ImuSpec, rng: &mut ChaCha8Rng) -> Result<ImuStream> {
    if !(spec.rate > 0.0) || !(t1 > t0) {
        return Err(Error::InvalidArgument(format!(
            "cannot sample [{t0}, {t1}] at {} Hz",
            spec.rate
        )));
    }
    let dt = 1.0 / spec.rate;
    let n = ((t1 - t0) * spec.rate).round() as usize;
    let gravity = Vec3::new(0.0, 0.0, -spec.gravity_magnitude);
    let mut bg = Vec3::from(spec.bias_gyro);
    let mut ba = Vec3::from(spec.bias_accel);
    let noise_a = spec.sigma_accel / dt.sqrt();
    let noise_g = spec.sigma_gyro / dt.sqrt();
    let walk_a = spec.sigma_bias_accel * dt.sqrt();
    let walk_g = spec.sigma_bias_gyro * dt.sqrt();

    let mut samples = Vec::with_capacity(n + 1);
    let mut truth = Vec::with_capacity(n + 1);
    let time = |k: usize| t0 + k as f64 / spec.rate;
    let mut current = spline.evaluate(time(0));
    for k in 0..=n {
        let next = spline.evaluate(time(k + 1));
        let omega = log_so3_unchecked(&(current.rotation.transpose() * next.rotation)) / dt;
        let accel = current.rotation.transpose() * ((next.velocity - current.velocity) / dt - gravity);
        truth.push(GroundTruth {
            t: current.t,
            state: NominalState {
                position: current.position,
                velocity: current.velocity,
                rotation: current.rotation,
                bias_gyro: bg,
                bias_accel: ba,
                gravity,
            },
        });
        samples.push(ImuSample {
            t: current.t,
            omega: omega + bg + gaussian(rng) * noise_g,
            accel: accel + ba + gaussian(rng) * noise_a,
        });
        bg += gaussian(rng) * walk_g;
        ba += gaussian(rng) * walk_a;
        current = next;
    }
    Ok(ImuStream { samples, truth })
}

/// One sweep starting at `t_start`. Each column of beams fires at its own
/// time from the sensor pose at that time, so a moving sensor produces a
/// skewed scan. Points are in the sensor frame; misses are dropped.
pub fn synth_scan(
    scene: &Scene,
    sensor_pose: impl Fn(f64) -> Pose,
    t_start: f64,
    pattern: &ScanPattern,
    sensor: SensorId,
    rng: &mut ChaCha8Rng,
) -> LidarFrame {
    let mut points = Vec::with_capacity(pattern.rings * pattern.points_per_ring);
    for column in 0..pattern.points_per_ring {
        let t = t_start + pattern.sweep_period * column as f64 / pattern.points_per_ring as f64;
        let pose = sensor_pose(t);
        for ring in 0..pattern.rings {
            let dir = pattern.direction(ring, column);
            let Some(range) = scene.cast_ray(&pose.translation, &(pose.rotation * dir), pattern.max_range) else {
                continue;
            };
            let noise: f64 = if pattern.range_noise > 0.0 {
                pattern.range_noise * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let measured = range + noise;
            if measured < pattern.min_range || measured > pattern.max_range {
                continue;
            }
            points.push(LidarPoint {
                xyz: dir * measured,
                t,
                source: sensor,
            });
        }
    }
    LidarFrame {
        points,
        t_start,
        t_end: t_start + pattern.sweep_period,
        frame_id: sensor,
    }
}

/// Rotation from roll, pitch and yaw: `Rz(yaw)·Ry(pitch)·Rx(roll)`.
pub fn rotation_rpy(roll: f64, pitch: f64, yaw: f64) -> crate::geometry::Mat3 {
    exp_so3(&Vec3::new(0.0, 0.0, yaw)) * exp_so3(&Vec3::new(0.0, pitch, 0.0)) * exp_so3(&Vec3::new(roll, 0.0, 0.0))
}
