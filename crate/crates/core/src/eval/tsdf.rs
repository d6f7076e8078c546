use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Point3;
use crate::geometry::{CameraIntrinsics, DepthMap, RigidPose};

pub const DEFAULT_VOXEL: f64 = 0.04;
pub const DEFAULT_TRUNCATION_VOXELS: f64 = 3.0;

/// Dense truncated signed distance grid. Voxel `(i, j, k)` has its centre at
/// `origin + voxel * (i, j, k)`; storage is x-fastest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TsdfVolume {
    origin: Point3,
    voxel: f64,
    truncation: f64,
    dims: [usize; 3],
    sdf: Vec<f64>,
    weight: Vec<f64>,
}

impl TsdfVolume {
    pub fn new(origin: Point3, voxel: f64, truncation: f64, dims: [usize; 3]) -> Self {
        assert!(voxel > 0.0 && truncation > 0.0, "voxel and truncation must be positive");
        let n = dims[0] * dims[1] * dims[2];
        Self { origin, voxel, truncation, dims, sdf: vec![truncation; n], weight: vec![0.0; n] }
    }

    /// Volume covering the axis-aligned box `[min, max]` with one voxel of margin.
    pub fn from_bounds(min: Point3, max: Point3, voxel: f64, truncation: f64) -> Self {
        let origin = [min[0] - voxel, min[1] - voxel, min[2] - voxel];
        let dims = [0, 1, 2].map(|a| ((max[a] - origin[a]) / voxel).ceil().max(0.0) as usize + 2);
        Self::new(origin, voxel, truncation, dims)
    }

    pub fn with_default_truncation(min: Point3, max: Point3, voxel: f64) -> Self {
        Self::from_bounds(min, max, voxel, DEFAULT_TRUNCATION_VOXELS * voxel)
    }

    pub fn origin(&self) -> Point3 {
        self.origin
    }

    pub fn voxel(&self) -> f64 {
        self.voxel
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn sdf(&self, i: usize, j: usize, k: usize) -> f64 {
        self.sdf[self.index(i, j, k)]
    }

    pub fn weight(&self, i: usize, j: usize, k: usize) -> f64 {
        self.weight[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Point3 {
        [
            self.origin[0] + self.voxel * i as f64,
            self.origin[1] + self.voxel * j as f64,
            self.origin[2] + self.voxel * k as f64,
        ]
    }

    /// Overwrites one voxel by linear index; `sdf` is clamped to the truncation band.
    pub fn set_raw(&mut self, idx: usize, sdf: f64, weight: f64) {
        self.sdf[idx] = sdf.clamp(-self.truncation, self.truncation);
        self.weight[idx] = weight.max(0.0);
    }

    pub fn observed_count(&self) -> usize {
        self.weight.iter().filter(|w| **w > 0.0).count()
    }

    /// Fuses one depth map taken from camera-to-world `pose`.
    pub fn integrate(&mut self, depth: &DepthMap, pose: &RigidPose, k: &CameraIntrinsics) {
        let world_to_cam = pose.inverse();
        let [nx, ny, _] = self.dims;
        let (origin, voxel, trunc) = (self.origin, self.voxel, self.truncation);
        let slab = nx * ny;
        self.sdf.par_chunks_mut(slab).zip(self.weight.par_chunks_mut(slab)).enumerate().for_each(
            |(kz, (sdf, weight))| {
                for j in 0..ny {
                    for i in 0..nx {
                        let p = Vector3::new(
                            origin[0] + voxel * i as f64,
                            origin[1] + voxel * j as f64,
                            origin[2] + voxel * kz as f64,
                        );
                        let c = world_to_cam.transform_point(&p);
                        if c.z <= 0.0 {
                            continue;
                        }
                        let u = k.fx * c.x / c.z + k.cx;
                        let v = k.fy * c.y / c.z + k.cy;
                        let Some(d) = sample_depth(depth, u, v) else { continue };
                        let dist = d - c.z;
                        if dist < -trunc {
                            continue;
                        }
                        let t = dist.min(trunc);
                        let idx = j * nx + i;
                        let w = weight[idx];
                        sdf[idx] = (sdf[idx] * w + t) / (w + 1.0);
                        weight[idx] = w + 1.0;
                    }
                }
            },
        );
    }
}

/// Bilinear depth lookup; requires all four neighbours to be valid.
fn sample_depth(depth: &DepthMap, u: f64, v: f64) -> Option<f64> {
    let (w, h) = (depth.width(), depth.height());
    if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
        return None;
    }
    let x0 = (u.floor() as usize).min(w.saturating_sub(2));
    let y0 = (v.floor() as usize).min(h.saturating_sub(2));
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let d = [depth.get(x0, y0), depth.get(x1, y0), depth.get(x0, y1), depth.get(x1, y1)];
    if d.iter().any(|x| *x <= 0.0) {
        return None;
    }
    Some((d[0] * (1.0 - fx) + d[1] * fx) * (1.0 - fy) + (d[2] * (1.0 - fx) + d[3] * fx) * fy)
}

/// Functional form of [`TsdfVolume::integrate`].
pub fn tsdf_integrate(
    mut vol: TsdfVolume,
    depth: &DepthMap,
    pose: &RigidPose,
    k: &CameraIntrinsics,
) -> TsdfVolume {
    vol.integrate(depth, pose, k);
    vol
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_frame() -> (DepthMap, CameraIntrinsics) {
        let k = CameraIntrinsics::new(40.0, 40.0, 19.5, 19.5, 40, 40).unwrap();
        (DepthMap::constant(40, 40, 1.0), k)
    }

    #[test]
    fn integrating_twice_doubles_weight() {
        let (d, k) = plane_frame();
        let vol = TsdfVolume::with_default_truncation([-0.3, -0.3, 0.5], [0.3, 0.3, 1.5], 0.04);
        let once = tsdf_integrate(vol, &d, &RigidPose::identity(), &k);
        let twice = tsdf_integrate(once.clone(), &d, &RigidPose::identity(), &k);
        for idx in 0..once.sdf.len() {
            assert!((once.sdf[idx] - twice.sdf[idx]).abs() < 1e-12);
            assert_eq!(twice.weight[idx], 2.0 * once.weight[idx]);
        }
        assert!(once.observed_count() > 0);
    }

    #[test]
    fn plane_surface_and_truncation() {
        let (d, k) = plane_frame();
        let vol = TsdfVolume::new([0.0, 0.0, 0.5], 0.02, 0.06, [1, 1, 51]);
        let vol = tsdf_integrate(vol, &d, &RigidPose::identity(), &k);
        for kz in 0..51 {
            let z = vol.voxel_center(0, 0, kz)[2];
            let (s, w) = (vol.sdf(0, 0, kz), vol.weight(0, 0, kz));
            if 1.0 - z < -0.06 {
                assert_eq!(w, 0.0, "z={z}");
            } else {
                assert_eq!(w, 1.0);
                assert!((s - (1.0 - z).min(0.06)).abs() < 1e-9);
                assert!(s.abs() <= vol.truncation());
            }
        }
        assert!(vol.sdf(0, 0, 25).abs() < 0.01);
    }

    #[test]
    fn invalid_neighbour_blocks_update() {
        let (mut d, k) = plane_frame();
        d.set(19, 19, 0.0);
        let vol = TsdfVolume::new([0.0, 0.0, 1.0], 0.02, 0.06, [1, 1, 1]);
        let vol = tsdf_integrate(vol, &d, &RigidPose::identity(), &k);
        assert_eq!(vol.weight(0, 0, 0), 0.0);
    }
}
