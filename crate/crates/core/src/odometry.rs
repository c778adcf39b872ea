//! The per-frame pipeline: IMU propagation, motion compensation,
//! registration against the neural map, filter correction, and map update.

use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::Matrix6;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eskf::{
    init_from_static, propagate, ErrorBelief, ImuSample, InitialPriors, NoiseConfig, NominalState,
};
use crate::geometry::{Pose, Vec3};
use crate::io::Dataset;
use crate::neural_map::{
    sample_training_points, sample_training_points_with_normals, FieldSample, MapConfig, NeuralMap, SdfField, TrainOptions,
    TrainingSample,
};
use crate::spatial::Neighbor;
use crate::preprocessing::{deskew, estimate_normals, merge_frames, slice_imu, LidarFrame, SensorRig};
use crate::registration::{
    register_semi, select_registration_points, update_semi, update_tight, MeasurementNoise, RegistrationConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Semi,
    #[default]
    Tight,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi" => Ok(Mode::Semi),
            "tight" => Ok(Mode::Tight),
            _ => Err(Error::InvalidArgument(format!("unknown mode {s:?} (expected semi or tight)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub mode: Mode,
    /// Length of the static IMU window used for initialization (s).
    pub init_window: f64,
    /// Consecutive skipped corrections after which the run counts as failed.
    pub max_consecutive_skips: usize,
    /// Leading frames that only build the map: the pose comes from the IMU
    /// alone and training runs longer, with its own learning rate.
    pub bootstrap_frames: u64,
    pub bootstrap_iterations: usize,
    pub bootstrap_learning_rate: f64,
    /// Training samples of this many past frames are replayed alongside
    /// the newest ones, which keeps the map anchored to earlier poses.
    pub replay_frames: usize,
    /// Replayed samples drawn per frame.
    pub replay_samples: usize,
    /// Points per frame used to generate training samples.
    pub training_points: usize,
    /// Registration ignores field samples whose neighbors accumulated less
    /// training weight than this on average.
    pub min_stability: f64,
    /// Neighborhood radius for the surface normals that rescale training
    /// labels to distances from the tangent plane; 0 keeps distances along
    /// the ray.
    pub normal_radius: f64,
    /// Seed of the training-sample generator.
    pub seed: u64,
    pub noise: NoiseConfig,
    pub priors: InitialPriors,
    pub measurement: MeasurementNoise,
    pub map: MapConfig,
    pub registration: RegistrationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Tight,
            init_window: 1.0,
            max_consecutive_skips: 10,
            bootstrap_frames: 10,
            bootstrap_iterations: 400,
            bootstrap_learning_rate: 1e-2,
            replay_frames: 20,
            replay_samples: 2000,
            training_points: 400,
            min_stability: 2.0,
            normal_radius: 1.0,
            seed: 0,
            noise: NoiseConfig::default(),
            priors: InitialPriors::default(),
            measurement: MeasurementNoise::default(),
            map: MapConfig::default(),
            registration: RegistrationConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.noise.validate()?;
        self.measurement.validate()?;
        self.map.validate()?;
        self.registration.validate()?;
        if !(self.init_window > 0.0) || self.training_points == 0 {
            return Err(Error::InvalidArgument(format!(
                "init_window must be positive and training_points non-zero: {} / {}",
                self.init_window, self.training_points
            )));
        }
        let ok = self.bootstrap_learning_rate > 0.0
            && self.bootstrap_learning_rate.is_finite()
            && self.max_consecutive_skips > 0
            && self.min_stability >= 0.0
            && self.normal_radius >= 0.0
            && (self.replay_frames > 0 || self.replay_samples == 0);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "invalid bootstrap, replay or gating settings: bootstrap_learning_rate {}, max_consecutive_skips {}, \
                 min_stability {}, normal_radius {}, replay {} samples over {} frames",
                self.bootstrap_learning_rate,
                self.max_consecutive_skips,
                self.min_stability,
                self.normal_radius,
                self.replay_samples,
                self.replay_frames
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub t: f64,
    pub pose: Pose,
    /// Marginal covariance of (position, attitude).
    pub covariance: Matrix6<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryRecord {
    pub entries: Vec<TrajectoryEntry>,
}

impl TrajectoryRecord {
    pub fn poses(&self) -> Vec<(f64, Pose)> {
        self.entries.iter().map(|e| (e.t, e.pose)).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub index: u64,
    pub t: f64,
    pub points: usize,
    pub registration_points: usize,
    pub corrected: bool,
    pub skipped: bool,
    pub error: Option<String>,
    pub iterations: usize,
    pub inliers: usize,
    pub final_cost: f64,
    pub inverted_dim: usize,
    pub added_points: usize,
    pub map_points: usize,
    pub train_loss: Option<f64>,
    pub registration_ms: f64,
    pub training_ms: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Option<Mode>,
    pub init_time: f64,
    pub init_bias_gyro: [f64; 3],
    pub init_bias_accel: [f64; 3],
    pub frames: Vec<FrameDiagnostics>,
    pub skipped_frames: usize,
    pub max_consecutive_skips: usize,
    pub failed: bool,
    pub map_points: usize,
    pub elapsed_s: f64,
}

/// The map restricted to neighborhoods that have been trained.
pub struct TrainedField<'a> {
    pub map: &'a NeuralMap,
    pub min_stability: f64,
}

impl TrainedField<'_> {
    fn neighbors(&self, q: &Vec3) -> Vec<Neighbor> {
        let mut nbrs = Vec::with_capacity(self.map.config().neighbors);
        self.map.neighbors(q, &mut nbrs);
        nbrs
    }

    fn trained(&self, nbrs: &[Neighbor]) -> bool {
        if self.min_stability <= 0.0 {
            return true;
        }
        let eps = self.map.config().weight_epsilon;
        let (mut total, mut weighted) = (0.0, 0.0);
        for &(d2, id) in nbrs {
            let w = 1.0 / (d2 + eps);
            total += w;
            weighted += w * self.map.stability(id);
        }
        weighted >= self.min_stability * total
    }
}

impl SdfField for TrainedField<'_> {
    fn sample(&self, q: &Vec3) -> FieldSample {
        let nbrs = self.neighbors(q);
        let sample = self.map.evaluate_neighbors(q, &nbrs);
        if !sample.valid || self.trained(&nbrs) {
            sample
        } else {
            FieldSample::invalid(nbrs.len())
        }
    }

    fn value(&self, q: &Vec3) -> Option<f64> {
        let nbrs = self.neighbors(q);
        if nbrs.len() < self.map.config().min_neighbors || !self.trained(&nbrs) {
            return None;
        }
        self.map.value_with_neighbors(q, &nbrs)
    }
}

/// Filter, map and history of one odometry run.
pub struct Odometry {
    config: PipelineConfig,
    rig: SensorRig,
    state: NominalState,
    belief: ErrorBelief,
    map: NeuralMap,
    rng: ChaCha8Rng,
    last_time: f64,
    /// Body poses at every propagation step, for motion compensation.
    history: Vec<(f64, Pose)>,
    replay: VecDeque<Vec<TrainingSample>>,
    frame_index: u64,
    consecutive_skips: usize,
    trajectory: TrajectoryRecord,
    report: RunReport,
}

impl Odometry {
    /// Gravity-aligned start from the static window `init_imu`, whose last
    /// sample marks the start of odometry.
    pub fn initialize(config: PipelineConfig, rig: SensorRig, init_imu: &[ImuSample]) -> Result<Self> {
        config.validate()?;
        rig.validate()?;
        let (state, belief) = init_from_static(init_imu, &config.noise, &config.priors)?;
        let t0 = init_imu.first().map(|s| s.t).unwrap_or(0.0);
        let t1 = init_imu.last().map(|s| s.t).unwrap_or(0.0);
        let map = NeuralMap::new(config.map)?;
        let report = RunReport {
            mode: Some(config.mode),
            init_time: t1,
            init_bias_gyro: state.bias_gyro.into(),
            init_bias_accel: state.bias_accel.into(),
            ..RunReport::default()
        };
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            rig,
            state,
            belief,
            map,
            last_time: t1,
            history: vec![(t0, state.pose()), (t1, state.pose())],
            replay: VecDeque::new(),
            frame_index: 0,
            consecutive_skips: 0,
            trajectory: TrajectoryRecord::default(),
            report,
        })
    }

    pub fn state(&self) -> &NominalState {
        &self.state
    }

    pub fn belief(&self) -> &ErrorBelief {
        &self.belief
    }

    pub fn map(&self) -> &NeuralMap {
        &self.map
    }

    pub fn trajectory(&self) -> &TrajectoryRecord {
        &self.trajectory
    }

    pub fn time(&self) -> f64 {
        self.last_time
    }

    fn propagate_to(&mut self, imu: &[ImuSample]) -> Result<()> {
        for pair in imu.windows(2) {
            let dt = pair[1].t - pair[0].t;
            if dt < 1e-9 {
                if let Some(last) = self.history.last_mut() {
                    last.0 = last.0.max(pair[1].t);
                }
                continue;
            }
            let (state, belief) = propagate(&self.state, &self.belief, &pair[0], dt, &self.config.noise)?;
            self.state = state;
            self.belief = belief;
            self.history.push((pair[1].t, state.pose()));
        }
        if let Some(last) = imu.last() {
            self.last_time = last.t;
        }
        Ok(())
    }

    fn sensor_poses(&self, t0: f64) -> Result<Vec<(f64, Pose)>> {
        let ext = self.rig.extrinsic(self.rig.main)?;
        let first = self.history.partition_point(|(t, _)| *t <= t0).saturating_sub(1);
        Ok(self.history[first..].iter().map(|(t, p)| (*t, p.compose(ext))).collect())
    }

    /// Processes one main-sensor sweep (already merged with any auxiliary
    /// sweeps) given the IMU window ending at `frame.t_end`.
    pub fn process_frame(&mut self, frame: &LidarFrame, imu: &[ImuSample]) -> FrameDiagnostics {
        let started = Instant::now();
        let mut diag = FrameDiagnostics {
            index: self.frame_index,
            t: frame.t_end,
            points: frame.points.len(),
            ..FrameDiagnostics::default()
        };
        if let Err(e) = self.step(frame, imu, &mut diag) {
            diag.error = Some(e.to_string());
        }
        if diag.skipped || diag.error.is_some() {
            self.consecutive_skips += 1;
            self.report.skipped_frames += 1;
        } else {
            self.consecutive_skips = 0;
        }
        self.report.max_consecutive_skips = self.report.max_consecutive_skips.max(self.consecutive_skips);
        if self.consecutive_skips >= self.config.max_consecutive_skips {
            self.report.failed = true;
        }
        self.trajectory.entries.push(TrajectoryEntry {
            t: frame.t_end,
            pose: self.state.pose(),
            covariance: self.belief.pose_covariance(),
        });
        let keep_from = frame.t_end - 1.0;
        let cut = self.history.partition_point(|(t, _)| *t < keep_from).saturating_sub(1);
        self.history.drain(..cut);
        self.frame_index += 1;
        diag.map_points = self.map.len();
        diag.elapsed_ms = started.elapsed().as_secs_f64() * 1e3;
        self.report.frames.push(diag.clone());
        diag
    }

    fn step(&mut self, frame: &LidarFrame, imu: &[ImuSample], diag: &mut FrameDiagnostics) -> Result<()> {
        self.propagate_to(imu)?;
        let deskewed = deskew(frame, &self.sensor_poses(frame.t_start)?)?;
        let ext = *self.rig.extrinsic(self.rig.main)?;
        let body: Vec<Vec3> = deskewed.points.iter().map(|p| ext.transform(&p.xyz)).collect();

        let bootstrap = self.frame_index < self.config.bootstrap_frames;
        if !bootstrap && !self.map.is_empty() {
            let mut reg_points = Vec::new();
            for id in self.rig.extrinsics.keys() {
                let own: Vec<Vec3> = deskewed
                    .points
                    .iter()
                    .zip(&body)
                    .filter(|(p, _)| p.source == *id)
                    .map(|(_, b)| *b)
                    .collect();
                reg_points.extend(select_registration_points(
                    &own,
                    self.config.registration.voxel_size,
                    self.config.registration.max_points,
                ));
            }
            diag.registration_points = reg_points.len();
            let started = Instant::now();
            self.correct(&reg_points, diag)?;
            diag.registration_ms = started.elapsed().as_secs_f64() * 1e3;
        }

        let pose = self.state.pose();
        let world: Vec<Vec3> = body.iter().map(|p| pose.transform(p)).collect();
        diag.added_points = self.map.insert_frame(&world, self.frame_index);

        let mut samples = Vec::new();
        let mut sensors_seen = 0;
        for (&id, ext) in &self.rig.extrinsics {
            let from_sensor: Vec<Vec3> = deskewed
                .points
                .iter()
                .zip(&world)
                .filter(|(p, _)| p.source == id)
                .map(|(_, w)| *w)
                .collect();
            if from_sensor.is_empty() {
                continue;
            }
            sensors_seen += 1;
            let chosen = select_registration_points(&from_sensor, self.map.config().resolution, self.config.training_points);
            let origin = pose.compose(ext).translation;
            if self.config.normal_radius > 0.0 {
                let normals = estimate_normals(&from_sensor, &chosen, self.config.normal_radius, 48);
                samples.extend(sample_training_points_with_normals(
                    &chosen,
                    &normals,
                    &origin,
                    self.map.config(),
                    &mut self.rng,
                ));
            } else {
                samples.extend(sample_training_points(&chosen, &origin, self.map.config(), &mut self.rng));
            }
        }
        let fresh = samples.len();
        let pooled: usize = self.replay.iter().map(Vec::len).sum();
        if pooled > 0 && self.config.replay_samples > 0 {
            let mut picks = rand::seq::index::sample(&mut self.rng, pooled, self.config.replay_samples.min(pooled)).into_vec();
            picks.sort_unstable();
            let mut frames = self.replay.iter();
            let mut current = frames.next().map(Vec::as_slice).unwrap_or(&[]);
            let mut base = 0;
            for k in picks {
                while k >= base + current.len() {
                    base += current.len();
                    current = frames.next().map(Vec::as_slice).unwrap_or(&[]);
                }
                samples.push(current[k - base]);
            }
        }
        if self.config.replay_frames > 0 {
            if self.replay.len() == self.config.replay_frames {
                self.replay.pop_front();
            }
            self.replay.push_back(samples[..fresh].to_vec());
        }
        let map_cfg = *self.map.config();
        let started = Instant::now();
        let opts = TrainOptions {
            iterations: if bootstrap { self.config.bootstrap_iterations } else { map_cfg.iterations },
            learning_rate: if bootstrap { self.config.bootstrap_learning_rate } else { map_cfg.learning_rate },
            train_decoder: None,
            batch_size: Some(map_cfg.batch_size * sensors_seen),
        };
        let report = self.map.optimize(&samples, &opts)?;
        diag.train_loss = report.losses.last().copied();
        diag.training_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(())
    }

    fn correct(&mut self, points: &[Vec3], diag: &mut FrameDiagnostics) -> Result<()> {
        let cfg = &self.config;
        let field = TrainedField {
            map: &self.map,
            min_stability: cfg.min_stability,
        };
        match cfg.mode {
            Mode::Semi => {
                let reg = match register_semi(points, &self.state.pose(), &field, &cfg.registration, &cfg.measurement) {
                    Ok(reg) => reg,
                    Err(e @ Error::RegistrationFailed { .. }) => {
                        diag.skipped = true;
                        diag.error = Some(e.to_string());
                        return Ok(());
                    }
                    Err(e) => return Err(e),
                };
                diag.iterations = reg.iterations;
                diag.inliers = reg.inlier_count;
                diag.final_cost = reg.final_cost;
                if !reg.converged {
                    diag.skipped = true;
                    return Ok(());
                }
                let (state, belief) = update_semi(&self.state, &self.belief, &reg, &cfg.measurement)?;
                self.state = state;
                self.belief = belief;
                diag.corrected = true;
            }
            Mode::Tight => {
                let out = update_tight(points, &self.state, &self.belief, &field, &cfg.measurement, &cfg.registration)?;
                diag.iterations = out.result.iterations;
                diag.inliers = out.result.inlier_count;
                diag.final_cost = out.result.final_cost;
                diag.inverted_dim = out.inverted_dim;
                if out.degraded {
                    diag.skipped = true;
                    return Ok(());
                }
                self.state = out.state;
                self.belief = out.belief;
                diag.corrected = true;
            }
        }
        Ok(())
    }

    pub fn finish(mut self, started: Instant) -> RunOutput {
        self.report.map_points = self.map.len();
        self.report.elapsed_s = started.elapsed().as_secs_f64();
        RunOutput {
            trajectory: self.trajectory,
            map: self.map,
            report: self.report,
        }
    }
}

pub struct RunOutput {
    pub trajectory: TrajectoryRecord,
    pub map: NeuralMap,
    pub report: RunReport,
}

/// Initializes from the leading static IMU window, then processes every
/// main-sensor frame that ends after it.
pub fn run(data: &Dataset, config: &PipelineConfig) -> Result<RunOutput> {
    let started = Instant::now();
    if data.imu.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(Error::InvalidArgument("IMU timestamps must increase strictly".into()));
    }
    let Some(first) = data.imu.first() else {
        return Err(Error::Coverage("IMU stream is empty".into()));
    };
    let init_end = first.t + config.init_window;
    let n_init = data.imu.partition_point(|s| s.t <= init_end + 1e-9);
    let mut odo = Odometry::initialize(config.clone(), data.rig.clone(), &data.imu[..n_init])?;

    let main = data.rig.main;
    let main_frames = data.frames.get(&main).map(Vec::as_slice).unwrap_or(&[]);
    let auxiliaries: Vec<&LidarFrame> = data
        .frames
        .iter()
        .filter(|(&id, _)| id != main)
        .flat_map(|(_, list)| list)
        .collect();
    for frame in main_frames {
        if frame.t_end <= odo.time() {
            continue;
        }
        let overlapping: Vec<LidarFrame> = auxiliaries
            .iter()
            .filter(|a| a.t_start < frame.t_end && a.t_end > frame.t_start)
            .map(|a| (*a).clone())
            .collect();
        let merged = merge_frames(frame, &overlapping, &data.rig)?;
        let imu = slice_imu(&data.imu, odo.time(), frame.t_end)?;
        let diag = odo.process_frame(&merged, &imu);
        log::debug!(
            "frame {} t={:.3} pts={} iters={} inliers={} skipped={} map={} {:.1} ms",
            diag.index,
            diag.t,
            diag.points,
            diag.iterations,
            diag.inliers,
            diag.skipped,
            diag.map_points,
            diag.elapsed_ms
        );
    }
    Ok(odo.finish(started))
}
