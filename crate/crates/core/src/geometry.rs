//! Pinhole cameras, rigid poses, depth maps and sparse depth reprojection.
//!
//! Pixel coordinates are `(u, v) = (column, row)` with the origin at the
//! centre of the top-left pixel. A pixel is in bounds when
//! `-0.5 <= u < width - 0.5` (and likewise for `v`).

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Points whose transformed depth falls at or below this value are treated
/// as behind the camera.
pub const MIN_POSITIVE_DEPTH: f64 = 1e-9;

const POSE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("transformed point has non-positive depth {0} in the source camera")]
    NonPositiveSourceDepth(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Pinhole intrinsics `K` plus the image size they apply to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0 && self.fx.is_finite() && self.fy.is_finite()) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidIntrinsics("image size must be non-zero".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cx={} outside [0, {})",
                self.cx, self.width
            )));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidIntrinsics(format!(
                "cy={} outside [0, {})",
                self.cy, self.height
            )));
        }
        Ok(())
    }

    /// Intrinsics of the pyramid level `1/scale`: focal lengths and principal
    /// point are divided by `scale`, the image size is rounded up.
    pub fn scaled(&self, scale: usize) -> Self {
        let s = scale as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
            width: self.width.div_ceil(scale),
            height: self.height.div_ceil(scale),
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, q: PixelCoord) -> bool {
        q.u >= -0.5
            && q.u < self.width as f64 - 0.5
            && q.v >= -0.5
            && q.v < self.height as f64 - 0.5
    }
}

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Builds a pose, checking that `rotation` is a proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= POSE_TOLERANCE) {
            return Err(GeometryError::InvalidPose(format!(
                "rotation is not orthonormal (max |RtR - I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= POSE_TOLERANCE) {
            return Err(GeometryError::InvalidPose(format!("det(R) = {det}, expected 1")));
        }
        if !translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first, then `self`.
    pub fn compose(&self, other: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidPose {
        let rt = self.rotation.transpose();
        RigidPose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Relative transform mapping points from the target camera frame into the
    /// source camera frame, given both camera-to-world poses.
    pub fn relative(target_to_world: &RigidPose, source_to_world: &RigidPose) -> RigidPose {
        source_to_world.inverse().compose(target_to_world)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidPose(format!(
                "last row must be [0 0 0 1], got {bottom:?}"
            )));
        }
        Self::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 16]) -> Result<Self, GeometryError> {
        Self::from_matrix(&Matrix4::from_row_slice(v))
    }

    /// Rotation from intrinsic X-Y-Z Euler angles: `R = Rx(a) Ry(b) Rz(c)`.
    pub fn from_euler_xyz(translation: Vector3<f64>, angles: [f64; 3]) -> Self {
        let (sa, ca) = angles[0].sin_cos();
        let (sb, cb) = angles[1].sin_cos();
        let (sc, cc) = angles[2].sin_cos();
        let rotation = Matrix3::new(
            cb * cc,
            -cb * sc,
            sb,
            ca * sc + sa * sb * cc,
            ca * cc - sa * sb * sc,
            -sa * cb,
            sa * sc - ca * sb * cc,
            sa * cc + ca * sb * sc,
            ca * cb,
        );
        Self { rotation, translation }
    }

    /// Inverse of [`RigidPose::from_euler_xyz`].
    pub fn euler_xyz(&self) -> [f64; 3] {
        let r = &self.rotation;
        let sb = r[(0, 2)].clamp(-1.0, 1.0);
        let b = sb.asin();
        if sb.abs() < 1.0 - 1e-12 {
            let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
            let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
            [a, b, c]
        } else {
            // gimbal lock: only a ± c is observable, put it all on a
            [r[(2, 1)].atan2(r[(1, 1)]), b, 0.0]
        }
    }

    /// 6-DoF vector `(t, r)` with intrinsic XYZ Euler angles.
    pub fn to_vector(&self) -> [f64; 6] {
        let t = self.translation;
        let r = self.euler_xyz();
        [t.x, t.y, t.z, r[0], r[1], r[2]]
    }

    pub fn from_vector(q: &[f64; 6]) -> Self {
        Self::from_euler_xyz(Vector3::new(q[0], q[1], q[2]), [q[3], q[4], q[5]])
    }

    /// Camera-to-world pose of a camera at `eye` looking at `target`. The
    /// camera looks down +z with +x right and +y down; `up` is the world
    /// direction that should appear upwards in the image.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self, GeometryError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidPose("eye and target coincide".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| GeometryError::InvalidPose("up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelCoord {
    pub u: f64,
    pub v: f64,
}

impl PixelCoord {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }
}

/// Back-projects a pixel at the given depth into camera coordinates.
pub fn backproject(q: PixelCoord, depth: f64, k: &CameraIntrinsics) -> Vector3<f64> {
    Vector3::new((q.u - k.cx) / k.fx * depth, (q.v - k.cy) / k.fy * depth, depth)
}

/// Maps a target pixel with known depth into the source view: `K P (d K⁻¹ q)`
/// followed by perspective division. Returns the source pixel and the depth
/// of the point in the source camera.
pub fn project_point(
    q_t: PixelCoord,
    depth: f64,
    k: &CameraIntrinsics,
    target_to_source: &RigidPose,
) -> Result<(PixelCoord, f64), GeometryError> {
    project_point_between(q_t, depth, k, k, target_to_source)
}

/// [`project_point`] for views with different intrinsics.
pub fn project_point_between(
    q_t: PixelCoord,
    depth: f64,
    k_target: &CameraIntrinsics,
    k_source: &CameraIntrinsics,
    target_to_source: &RigidPose,
) -> Result<(PixelCoord, f64), GeometryError> {
    if !(depth > 0.0) {
        return Err(GeometryError::NonPositiveDepth(depth));
    }
    let p = target_to_source.transform_point(&backproject(q_t, depth, k_target));
    if !(p.z > MIN_POSITIVE_DEPTH) {
        return Err(GeometryError::NonPositiveSourceDepth(p.z));
    }
    let u = k_source.fx * p.x / p.z + k_source.cx;
    let v = k_source.fy * p.y / p.z + k_source.cy;
    Ok((PixelCoord { u, v }, p.z))
}

/// Dense depth map in metres. A pixel is valid iff its value is `> 0`;
/// invalid pixels hold the sentinel `0`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DepthMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, values: vec![0.0; width * height] }
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self { width, height, values: vec![value; width * height] }
    }

    /// Wraps raw values. Non-finite or non-positive entries become invalid.
    pub fn from_values(width: usize, height: usize, mut values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.len() != width * height {
            return Err(GeometryError::DimensionMismatch(format!(
                "{} values for a {width}x{height} map",
                values.len()
            )));
        }
        for v in &mut values {
            if !(v.is_finite() && *v > 0.0) {
                *v = 0.0;
            }
        }
        Ok(Self { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Stores `value`, mapping anything non-positive or non-finite to invalid.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.values[y * self.width + x] = if value.is_finite() && value > 0.0 { value } else { 0.0 };
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.get(x, y) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v > 0.0).count()
    }

    pub fn same_shape(&self, other: &DepthMap) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Samples every `stride`-th pixel starting at the origin, matching the
    /// geometry of [`CameraIntrinsics::scaled`].
    pub fn subsample(&self, stride: usize) -> DepthMap {
        let w = self.width.div_ceil(stride);
        let h = self.height.div_ceil(stride);
        let mut out = DepthMap::new(w, h);
        for y in 0..h {
            for x in 0..w {
                out.values[y * w + x] = self.get(x * stride, y * stride);
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> DepthMap {
        let mut out = self.clone();
        for y in 0..self.height {
            let row = &mut out.values[y * self.width..(y + 1) * self.width];
            row.reverse();
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseSample {
    pub coord: PixelCoord,
    pub depth: f64,
}

/// Sparse depth samples with sub-pixel coordinates in an image of the given
/// size.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseDepthMap {
    pub width: usize,
    pub height: usize,
    pub samples: Vec<SparseSample>,
}

impl SparseDepthMap {
    pub fn new(width: usize, height: usize, samples: Vec<SparseSample>) -> Self {
        Self { width, height, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Rasterizes onto the `1/scale` grid. Sample `(u, v)` lands in cell
    /// `(round(u/scale), round(v/scale))`; collisions keep the minimum depth.
    pub fn rasterize(&self, scale: usize) -> DepthMap {
        let w = self.width.div_ceil(scale);
        let h = self.height.div_ceil(scale);
        let mut out = DepthMap::new(w, h);
        for sample in &self.samples {
            if !(sample.depth > 0.0) {
                continue;
            }
            let Some((x, y)) = raster_cell(sample.coord, scale, (self.width, self.height), (w, h)) else {
                continue;
            };
            let idx = y * w + x;
            let cur = out.values[idx];
            if cur == 0.0 || sample.depth < cur {
                out.values[idx] = sample.depth;
            }
        }
        out
    }

    pub fn flip_horizontal(&self) -> SparseDepthMap {
        let w = self.width as f64 - 1.0;
        SparseDepthMap {
            width: self.width,
            height: self.height,
            samples: self
                .samples
                .iter()
                .map(|s| SparseSample { coord: PixelCoord::new(w - s.coord.u, s.coord.v), depth: s.depth })
                .collect(),
        }
    }
}

fn raster_cell(q: PixelCoord, scale: usize, full: (usize, usize), grid: (usize, usize)) -> Option<(usize, usize)> {
    let inside = q.u >= -0.5 && q.u < full.0 as f64 - 0.5 && q.v >= -0.5 && q.v < full.1 as f64 - 0.5;
    if !inside {
        return None;
    }
    // points near the right/bottom edge can round one cell past the grid
    let s = scale as f64;
    let x = ((q.u / s).round().max(0.0) as usize).min(grid.0 - 1);
    let y = ((q.v / s).round().max(0.0) as usize).min(grid.1 - 1);
    Some((x, y))
}

/// Result of moving sparse samples into another view.
#[derive(Debug, Clone, PartialEq)]
pub struct Reprojection {
    pub map: SparseDepthMap,
    pub dropped: usize,
}

/// Projects every source sample into the target view, keeping sub-pixel
/// coordinates. Samples behind the target camera or outside its image are
/// dropped and counted.
pub fn reproject_sparse_depth(
    src: &SparseDepthMap,
    source_to_target: &RigidPose,
    k: &CameraIntrinsics,
) -> Reprojection {
    let mut samples = Vec::with_capacity(src.samples.len());
    let mut dropped = 0;
    for s in &src.samples {
        match project_point(s.coord, s.depth, k, source_to_target) {
            Ok((q, z)) if k.contains(q) => samples.push(SparseSample { coord: q, depth: z }),
            _ => dropped += 1,
        }
    }
    Reprojection { map: SparseDepthMap::new(k.width, k.height, samples), dropped }
}
