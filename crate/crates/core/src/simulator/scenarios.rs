//! Named simulation scenarios and the closed-loop world they run in.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    rotation_rpy, synth_imu, synth_scan, ControlPose, GroundTruth, ImuSpec, Primitive, ScanPattern, Scene,
    TrajectorySpline,
};
use crate::error::{Error, Result};
use crate::eskf::ImuSample;
use crate::geometry::{exp_so3, Mat3, Pose, Vec3};
use crate::preprocessing::{LidarFrame, SensorId, SensorRig};

pub const MAIN_SENSOR: SensorId = 0;
pub const AUX_SENSOR: SensorId = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Motion {
    Static,
    FigureEight,
    AggressiveSpin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub motion: Motion,
    /// Total length including the static lead-in (s).
    pub duration: f64,
    /// Motionless time at the start, used for initialization (s).
    pub lead_in: f64,
    /// Time over which motion eases in after the lead-in (s).
    pub ramp: f64,
    pub knot_spacing: f64,
    pub imu: ImuSpec,
    pub lidar_rate: f64,
    pub pattern: ScanPattern,
    /// Adds a vertically mounted second LiDAR.
    pub dual_lidar: bool,
    /// Start of the auxiliary sweeps relative to the main sweeps (s).
    pub aux_offset: f64,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            motion: Motion::Static,
            duration: 10.0,
            lead_in: 1.0,
            ramp: 2.0,
            knot_spacing: 0.2,
            imu: ImuSpec {
                sigma_accel: 0.02,
                sigma_gyro: 0.002,
                bias_gyro: [0.004, -0.003, 0.002],
                bias_accel: [0.03, -0.02, 0.04],
                ..ImuSpec::default()
            },
            lidar_rate: 10.0,
            pattern: ScanPattern {
                range_noise: 0.005,
                ..ScanPattern::default()
            },
            dual_lidar: false,
            aux_offset: 0.05,
            seed: 0,
        }
    }
}

/// Scenario names understood by [`preset`].
pub const PRESETS: [&str; 4] = ["static_10s", "figure_eight_60s", "aggressive_spin_30s", "dual_rig_20s"];

pub fn preset(name: &str) -> Option<ScenarioConfig> {
    let base = ScenarioConfig {
        name: name.to_string(),
        ..ScenarioConfig::default()
    };
    Some(match name {
        "static_10s" => ScenarioConfig {
            motion: Motion::Static,
            duration: 10.0,
            ..base
        },
        "figure_eight_60s" => ScenarioConfig {
            motion: Motion::FigureEight,
            duration: 60.0,
            ..base
        },
        "aggressive_spin_30s" => ScenarioConfig {
            motion: Motion::AggressiveSpin,
            duration: 30.0,
            knot_spacing: 0.1,
            ..base
        },
        "dual_rig_20s" => ScenarioConfig {
            motion: Motion::FigureEight,
            duration: 20.0,
            dual_lidar: true,
            ..base
        },
        _ => return None,
    })
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.pattern.validate()?;
        let ok = self.duration > self.lead_in
            && self.lead_in >= 0.0
            && self.ramp > 0.0
            && self.knot_spacing > 0.0
            && self.lidar_rate > 0.0
            && self.imu.rate > 0.0
            && self.pattern.sweep_period <= 1.0 / self.lidar_rate + 1e-12;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid scenario: {self:?}")))
        }
    }
}

/// A closed room with floor, ceiling, pillars, crates and spheres. The
/// platform starts at the origin, 1.2 m above the floor.
pub fn room_scene() -> Scene {
    let b = |c: [f64; 3], h: [f64; 3]| Primitive::Box {
        center: Vec3::from(c),
        half_extents: Vec3::from(h),
    };
    let s = |c: [f64; 3], r: f64| Primitive::Sphere {
        center: Vec3::from(c),
        radius: r,
    };
    Scene::new(vec![
        Primitive::plane(Vec3::z(), -1.2),
        Primitive::plane(-Vec3::z(), -2.3),
        Primitive::plane(Vec3::x(), -8.0),
        Primitive::plane(-Vec3::x(), -8.5),
        Primitive::plane(Vec3::y(), -6.0),
        Primitive::plane(-Vec3::y(), -5.5),
        b([6.0, 4.0, 0.0], [0.3, 0.3, 2.5]),
        b([-5.5, -3.8, 0.0], [0.4, 0.4, 2.5]),
        b([0.5, 4.4, 0.0], [0.3, 0.5, 2.5]),
        b([-6.5, 2.5, -0.8], [0.6, 1.0, 0.4]),
        b([3.5, -4.3, -0.6], [1.2, 0.5, 0.6]),
        b([7.3, -1.0, 0.2], [0.5, 1.5, 1.4]),
        s([-2.5, 4.6, -0.4], 0.8),
        s([1.5, -4.4, 1.4], 0.6),
        s([-7.4, -1.5, 1.0], 0.7),
    ])
}

fn warp(t: f64, ramp: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t < ramp {
        t * t / (2.0 * ramp)
    } else {
        t - 0.5 * ramp
    }
}

/// Closed-form path as a function of warped time, starting at the origin
/// with identity attitude.
fn path(motion: Motion, tau: f64) -> (Vec3, f64, f64, f64) {
    match motion {
        Motion::Static => (Vec3::zeros(), 0.0, 0.0, 0.0),
        Motion::FigureEight => {
            let w = std::f64::consts::TAU / 20.0;
            let p = Vec3::new(3.0 * (w * tau).sin(), 1.5 * (2.0 * w * tau).sin(), 0.2 * (w * tau).sin());
            let roll = 0.05 * (1.3 * w * tau).sin();
            let pitch = 0.05 * (0.7 * w * tau).sin();
            let yaw = 0.6 * (w * tau).sin();
            (p, roll, pitch, yaw)
        }
        Motion::AggressiveSpin => {
            let p = Vec3::new(
                0.8 * (0.6 * tau).sin(),
                0.6 * (1.0 - (0.8 * tau).cos()),
                0.15 * (1.1 * tau).sin(),
            );
            let yaw = 2.5 * tau + 0.8 * (1.5 * tau).sin();
            let roll = 0.3 * (2.1 * tau).sin();
            let pitch = 0.25 * (1.7 * tau).sin();
            (p, roll, pitch, yaw)
        }
    }
}

pub fn trajectory(config: &ScenarioConfig) -> Result<TrajectorySpline> {
    let mut knots = vec![ControlPose {
        t: 0.0,
        position: Vec3::zeros(),
        rotation: Mat3::identity(),
    }];
    let mut t = config.lead_in;
    while t <= config.duration + 1e-9 {
        let (position, roll, pitch, yaw) = path(config.motion, warp(t - config.lead_in, config.ramp));
        knots.push(ControlPose {
            t,
            position,
            rotation: rotation_rpy(roll, pitch, yaw),
        });
        t += config.knot_spacing;
    }
    TrajectorySpline::new(knots)
}

pub fn rig(dual: bool) -> SensorRig {
    let mut rig = SensorRig::single(MAIN_SENSOR, Pose::from_translation(Vec3::new(0.0, 0.0, 0.1)));
    if dual {
        rig.extrinsics.insert(
            AUX_SENSOR,
            Pose::new(
                exp_so3(&Vec3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0)),
                Vec3::new(0.1, 0.0, 0.2),
            ),
        );
    }
    rig
}

#[derive(Debug, Clone)]
pub struct SimulatedRun {
    pub config: ScenarioConfig,
    pub scene: Scene,
    pub spline: TrajectorySpline,
    pub imu: Vec<ImuSample>,
    pub truth: Vec<GroundTruth>,
    pub frames: BTreeMap<SensorId, Vec<LidarFrame>>,
    pub rig: SensorRig,
}

pub fn simulate(config: &ScenarioConfig) -> Result<SimulatedRun> {
    config.validate()?;
    let scene = room_scene();
    let spline = trajectory(config)?;
    let mut imu_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lidar_rng = ChaCha8Rng::seed_from_u64(config.seed);
    lidar_rng.set_stream(1);

    let stream = synth_imu(&spline, 0.0, config.duration, &config.imu, &mut imu_rng)?;
    let rig = rig(config.dual_lidar);
    let period = 1.0 / config.lidar_rate;
    let imu_end = stream.samples.last().map_or(0.0, |s| s.t);
    let sweep = config.pattern.sweep_period;

    let mut frames = BTreeMap::new();
    for (&id, extrinsic) in &rig.extrinsics {
        let offset = if id == MAIN_SENSOR { 0.0 } else { config.aux_offset - period };
        let sensor_pose = |t: f64| spline.pose(t).compose(extrinsic);
        let mut list = Vec::new();
        let mut k = 0;
        loop {
            let t_start = config.lead_in + offset + k as f64 / config.lidar_rate;
            if t_start + sweep > imu_end {
                break;
            }
            list.push(synth_scan(&scene, sensor_pose, t_start, &config.pattern, id, &mut lidar_rng));
            k += 1;
        }
        frames.insert(id, list);
    }
    Ok(SimulatedRun {
        config: config.clone(),
        scene,
        spline,
        imu: stream.samples,
        truth: stream.truth,
        frames,
        rig,
    })
}

impl SimulatedRun {
    pub fn dataset(&self) -> crate::io::Dataset {
        crate::io::Dataset {
            imu: self.imu.clone(),
            frames: self.frames.clone(),
            rig: self.rig.clone(),
        }
    }

    /// Ground-truth body poses at the IMU rate.
    pub fn truth_poses(&self) -> Vec<(f64, Pose)> {
        self.truth.iter().map(|g| (g.t, g.state.pose())).collect()
    }
}
