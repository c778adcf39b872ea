use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use knlio::commands::{self, AppConfig};
use knlio::meshing::Aabb;
use knlio::odometry::Mode;

/// LiDAR-inertial odometry with a neural-point SDF map.
#[derive(Debug, Parser)]
#[command(name = "knlio", version)]
struct Cli {
    /// TOML configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a simulated dataset with ground truth and reference surface points.
    Simulate {
        /// Preset name or scenario TOML file.
        #[arg(long, default_value = "static_10s")]
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the odometry; writes trajectory.tum, map.knmap and report.json.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Extract a PLY mesh from a map snapshot.
    Mesh {
        /// Map snapshot (a run directory is accepted too).
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "mesh-voxel")]
        mesh_voxel: Option<f64>,
        /// xmin,ymin,zmin,xmax,ymax,zmax
        #[arg(long)]
        bounds: Option<Aabb>,
    },
    /// Trajectory error against ground truth, or reconstruction metrics.
    Eval {
        /// Estimated trajectory (TUM).
        #[arg(long, requires = "truth", conflicts_with_all = ["mesh", "reference"])]
        trajectory: Option<PathBuf>,
        /// Ground-truth trajectory (TUM).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Reconstructed mesh or point PLY.
        #[arg(long, requires = "reference")]
        mesh: Option<PathBuf>,
        /// Reference surface PLY.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Metrics JSON; printed to stdout either way.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

fn load_config(path: Option<&PathBuf>) -> Result<AppConfig> {
    match path {
        Some(p) => AppConfig::load(p).context("loading configuration"),
        None => Ok(AppConfig::default()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_ref())?;
    match cli.command {
        Command::Simulate { scenario, out, seed } => {
            let mut sc = commands::resolve_scenario(&scenario).context("simulate: resolving scenario")?;
            if let Some(s) = seed {
                sc.seed = s;
            }
            let summary = commands::simulate(&sc, &out, &config.eval).context("simulate")?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Run { dataset, out, mode, seed } => {
            if let Some(m) = mode {
                config.pipeline.mode = m;
            }
            if let Some(s) = seed {
                config.pipeline.seed = s;
            }
            let report = commands::run(&dataset, &config.pipeline, &out).context("run")?;
            log::info!(
                "{} frames, {} skipped, {} map points, {:.1} s",
                report.frames.len(),
                report.skipped_frames,
                report.map_points,
                report.elapsed_s
            );
            if report.failed {
                bail!("run: too many consecutive frames without a correction");
            }
        }
        Command::Mesh { map, out, mesh_voxel, bounds } => {
            if let Some(v) = mesh_voxel {
                config.meshing.voxel = v;
            }
            let snapshot = if map.is_dir() { map.join(commands::SNAPSHOT_FILE) } else { map };
            let mesh = commands::mesh(&snapshot, bounds, &config.meshing, &out).context("mesh")?;
            log::info!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
        }
        Command::Eval {
            trajectory,
            truth,
            mesh,
            reference,
            out,
        } => {
            let json = match (trajectory, truth, mesh, reference) {
                (Some(est), Some(gt), None, None) => {
                    let m = commands::eval_trajectory(&est, &gt, out.as_deref()).context("eval")?;
                    serde_json::to_string_pretty(&m)?
                }
                (None, None, Some(recon), Some(reference)) => {
                    let m = commands::eval_map(&recon, &reference, &config.eval, out.as_deref()).context("eval")?;
                    serde_json::to_string_pretty(&m)?
                }
                _ => bail!("eval: give --trajectory with --truth, or --mesh with --reference"),
            };
            println!("{json}");
        }
        Command::DefaultConfig => print!("{}", config.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("KNLIO_LOG", "info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
