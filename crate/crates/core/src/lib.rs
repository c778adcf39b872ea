//! LiDAR-inertial odometry and mapping on an error-state Kalman filter
//! coupled with an incrementally trained neural-point signed distance field.

pub mod commands;
pub mod error;
pub mod eskf;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod meshing;
pub mod neural_map;
pub mod odometry;
pub mod preprocessing;
pub mod registration;
pub mod simulator;
pub mod spatial;

pub use error::{Error, Result};
