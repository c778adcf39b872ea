//! File-level operations behind the command-line tool. Every output is a
//! pure function of the inputs and configuration, except the timing fields
//! of the run report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ate_rmse, associate, map_metrics, sample_surface, MapMetrics, DEFAULT_F_THRESHOLD_CM, DEFAULT_SAMPLE_DENSITY};
use crate::geometry::Vec3;
use crate::io::{read_dataset, read_ply, read_toml, read_tum, write_dataset, write_json, write_ply, write_tum, TRUTH_FILE};
use crate::meshing::{extract_map_mesh, extract_mesh, write_mesh, Aabb, TriangleMesh, DEFAULT_MAX_CELLS};
use crate::neural_map::{read_snapshot, write_snapshot};
use crate::odometry::{run as run_pipeline, PipelineConfig, RunReport};
use crate::simulator::scenarios::{preset, simulate as simulate_run, ScenarioConfig, PRESETS};

pub const TRAJECTORY_FILE: &str = "trajectory.tum";
pub const SNAPSHOT_FILE: &str = "map.knmap";
pub const REPORT_FILE: &str = "report.json";
pub const REFERENCE_FILE: &str = "reference.ply";
pub const SCENARIO_FILE: &str = "scenario.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSettings {
    /// Grid spacing (m).
    pub voxel: f64,
    pub max_cells: u64,
    /// Padding around the map points when no bounds are given (m).
    pub margin: f64,
    /// Emit triangles only in cells whose corners all have map support.
    pub observed_only: bool,
}

impl Default for MeshSettings {
    fn default() -> Self {
        Self {
            voxel: 0.05,
            max_cells: DEFAULT_MAX_CELLS,
            margin: 0.5,
            observed_only: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub f_threshold_cm: f64,
    /// Mesh surface samples per m².
    pub sample_density: f64,
    /// Density of the reference points written by `simulate` (per m²).
    pub reference_density: f64,
    pub sample_seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            f_threshold_cm: DEFAULT_F_THRESHOLD_CM,
            sample_density: DEFAULT_SAMPLE_DENSITY,
            reference_density: 1000.0,
            sample_seed: 0,
        }
    }
}

/// Contents of the TOML configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub pipeline: PipelineConfig,
    pub meshing: MeshSettings,
    pub eval: EvalSettings,
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let config: AppConfig = read_toml(path)?;
        config
            .pipeline
            .validate()
            .map_err(|e| Error::parse(path, 0, e.to_string()))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

/// A preset name or the path of a scenario TOML file.
pub fn resolve_scenario(spec: &str) -> Result<ScenarioConfig> {
    if let Some(s) = preset(spec) {
        return Ok(s);
    }
    let path = Path::new(spec);
    if path.is_file() {
        return read_toml(path);
    }
    Err(Error::InvalidArgument(format!(
        "'{spec}' is neither a scenario file nor one of {}",
        PRESETS.join(", ")
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub scenario: String,
    pub imu_samples: usize,
    pub frames: usize,
    pub reference_points: usize,
}

/// Writes a simulated dataset, its ground truth at the IMU rate and points
/// sampled from the scene surface.
pub fn simulate(scenario: &ScenarioConfig, out: &Path, eval: &EvalSettings) -> Result<SimulateSummary> {
    let sim = simulate_run(scenario)?;
    write_dataset(out, &sim.dataset())?;
    write_tum(&out.join(TRUTH_FILE), &sim.truth_poses())?;
    crate::io::write_toml(&out.join(SCENARIO_FILE), scenario)?;

    // The room spans x ∈ [-8, 8.5], y ∈ [-6, 5.5], z ∈ [-1.2, 2.3].
    let bounds = Aabb::new(Vec3::new(-8.5, -6.5, -1.7), Vec3::new(9.0, 6.0, 2.8))?;
    let surface = extract_mesh(&sim.scene, &bounds, 0.1, 1.0, DEFAULT_MAX_CELLS)?;
    let reference = sample_surface(&surface, eval.reference_density, eval.sample_seed);
    write_ply(&out.join(REFERENCE_FILE), &reference, None)?;
    Ok(SimulateSummary {
        scenario: scenario.name.clone(),
        imu_samples: sim.imu.len(),
        frames: sim.frames.values().map(Vec::len).sum(),
        reference_points: reference.len(),
    })
}

/// Runs the odometry on a dataset directory and writes the trajectory, map
/// snapshot and report into `out`.
pub fn run(dataset: &Path, config: &PipelineConfig, out: &Path) -> Result<RunReport> {
    config.validate()?;
    let data = read_dataset(dataset)?;
    let output = run_pipeline(&data, config)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_tum(&out.join(TRAJECTORY_FILE), &output.trajectory.poses())?;
    write_snapshot(&output.map, &out.join(SNAPSHOT_FILE))?;
    write_json(&out.join(REPORT_FILE), &output.report)?;
    Ok(output.report)
}

/// Meshes a map snapshot into a PLY file. Without bounds the grid spans the
/// neural points plus the configured margin.
pub fn mesh(snapshot: &Path, bounds: Option<Aabb>, settings: &MeshSettings, out: &Path) -> Result<TriangleMesh> {
    let map = read_snapshot(snapshot)?;
    let bounds = match bounds {
        Some(b) => b,
        None if map.is_empty() => Aabb::new(Vec3::zeros(), Vec3::repeat(settings.voxel))?,
        None => Aabb::around(map.positions(), settings.margin)?,
    };
    let mesh = extract_map_mesh(&map, &bounds, settings.voxel, settings.max_cells, settings.observed_only)?;
    write_mesh(&mesh, out)?;
    Ok(mesh)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub ate_rmse_m: f64,
    pub associated_poses: usize,
}

pub fn eval_trajectory(estimated: &Path, truth: &Path, out: Option<&Path>) -> Result<TrajectoryMetrics> {
    let est = read_tum(estimated)?;
    let gt = read_tum(truth)?;
    let metrics = TrajectoryMetrics {
        ate_rmse_m: ate_rmse(&est, &gt)?,
        associated_poses: associate(&est, &gt)?.0.len(),
    };
    if let Some(path) = out {
        write_json(path, &metrics)?;
    }
    Ok(metrics)
}

/// Points of a PLY file: surface samples when it has faces, its vertices
/// otherwise.
pub fn ply_points(path: &Path, settings: &EvalSettings) -> Result<Vec<Vec3>> {
    let ply = read_ply(path)?;
    let vertices: Vec<Vec3> = ply
        .vertices
        .iter()
        .map(|v| Vec3::new(v[0] as f64, v[1] as f64, v[2] as f64))
        .collect();
    if ply.faces.is_empty() {
        return Ok(vertices);
    }
    let mut triangles = Vec::with_capacity(ply.faces.len());
    for (k, f) in ply.faces.iter().enumerate() {
        if f.iter().any(|&i| i < 0 || i as usize >= vertices.len()) {
            return Err(Error::InvalidArgument(format!(
                "{}: face {k} references a vertex out of range",
                path.display()
            )));
        }
        triangles.push(f.map(|i| i as u32));
    }
    let mesh = TriangleMesh {
        vertices,
        triangles,
        normals: None,
    };
    Ok(sample_surface(&mesh, settings.sample_density, settings.sample_seed))
}

pub fn eval_map(reconstruction: &Path, reference: &Path, settings: &EvalSettings, out: Option<&Path>) -> Result<MapMetrics> {
    let recon = ply_points(reconstruction, settings)?;
    let reference_points = ply_points(reference, settings)?;
    let metrics = map_metrics(&recon, &reference_points, settings.f_threshold_cm)?;
    if let Some(path) = out {
        write_json(path, &metrics)?;
    }
    Ok(metrics)
}
