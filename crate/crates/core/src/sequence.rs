//! In-memory RGB-D sequences.

use crate::geometry::{CameraIntrinsics, DepthMap, RigidPose, SparseDepthMap};
use crate::raster::ColorImage;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub timestamp: f64,
    /// Camera-to-world.
    pub pose: RigidPose,
    pub color: ColorImage,
    /// Dense ground truth used for evaluation only.
    pub gt_depth: Option<DepthMap>,
    /// Depth-sensor measurement; present on depth-bearing frames.
    pub sparse: Option<SparseDepthMap>,
}

impl Frame {
    pub fn has_depth(&self) -> bool {
        self.sparse.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<Frame>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Index of the latest depth-bearing frame at or before `target`.
    pub fn source_for(&self, target: usize) -> Option<usize> {
        (0..=target.min(self.frames.len().checked_sub(1)?)).rev().find(|&i| self.frames[i].has_depth())
    }

    pub fn depth_frames(&self) -> Vec<usize> {
        self.frames.iter().filter(|f| f.has_depth()).map(|f| f.index).collect()
    }
}
