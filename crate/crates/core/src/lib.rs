//! Temporal depth densification: dense depth for an RGB frame from an
//! earlier frame's sparse depth, by iterative fusion of epipolar
//! correlation, monocular and sparse-depth cues.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod decoder;
pub mod encoding;
pub mod eval;
pub mod geometry;
pub mod harness;
pub mod integrator;
pub mod model;
pub mod nn;
pub mod raster;
pub mod scene;
pub mod sequence;
pub mod training;
