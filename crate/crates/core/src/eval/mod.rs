//! Depth and reconstruction metrics, TSDF fusion and mesh extraction.

mod kdtree;
mod mc_tables;
mod mesh;
mod metrics;
pub mod ply;
mod tsdf;

use thiserror::Error;

pub use kdtree::KdTree;
pub use mesh::{extract_mesh, sample_points, Mesh, DEFAULT_DENSITY};
pub use metrics::{brute_force_nn, metrics_2d, metrics_3d, Metrics2D, Metrics3D, DEFAULT_THRESHOLD};
pub use tsdf::{tsdf_integrate, TsdfVolume, DEFAULT_TRUNCATION_VOXELS, DEFAULT_VOXEL};

pub type Point3 = [f64; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("ground truth has no valid pixels")]
    EmptyValidSet,
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("volume has no zero crossing")]
    EmptySurface,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}
