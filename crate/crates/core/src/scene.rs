//! Ray-cast synthetic RGB-D scenes, trajectories and sequence generation.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, DepthMap, PixelCoord, RigidPose, SparseDepthMap, SparseSample};
use crate::raster::ColorImage;
use crate::sequence::{Frame, Sequence};

const HIT_EPSILON: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("tau must be 1/m for a positive integer m, got {0}")]
    InvalidTau(f64),
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Plane { point: [f64; 3], normal: [f64; 3], texture: usize },
    Sphere { center: [f64; 3], radius: f64, texture: usize },
    /// Solid axis-aligned box.
    Cuboid { min: [f64; 3], max: [f64; 3], texture: usize },
}

/// Multi-octave value noise anchored in world coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub seed: u64,
    /// Size of the coarsest noise cell in metres.
    pub cell: f64,
    pub octaves: u32,
    pub base: [f64; 3],
    pub contrast: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub textures: Vec<Texture>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        for p in &self.primitives {
            let tex = match p {
                Primitive::Plane { normal, texture, .. } => {
                    let n = Vector3::from(*normal).norm();
                    if (n - 1.0).abs() > 1e-9 {
                        return Err(SceneError::InvalidScene(format!("plane normal has norm {n}")));
                    }
                    *texture
                }
                Primitive::Sphere { radius, texture, .. } => {
                    if !(*radius > 0.0) {
                        return Err(SceneError::InvalidScene(format!("sphere radius {radius}")));
                    }
                    *texture
                }
                Primitive::Cuboid { min, max, texture } => {
                    if (0..3).any(|a| !(max[a] > min[a])) {
                        return Err(SceneError::InvalidScene(format!("cuboid {min:?}..{max:?} is empty")));
                    }
                    *texture
                }
            };
            if tex >= self.textures.len() {
                return Err(SceneError::InvalidScene(format!("texture {tex} out of range")));
            }
        }
        Ok(())
    }

    /// An axis-aligned closed box `[min, max]` seen from the inside.
    pub fn add_box_room(&mut self, min: [f64; 3], max: [f64; 3], textures: [usize; 6]) {
        for axis in 0..3 {
            let mut n = [0.0; 3];
            n[axis] = 1.0;
            self.primitives.push(Primitive::Plane { point: min, normal: n, texture: textures[2 * axis] });
            n[axis] = -1.0;
            self.primitives.push(Primitive::Plane { point: max, normal: n, texture: textures[2 * axis + 1] });
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Hit {
    t: f64,
    point: Vector3<f64>,
    texture: usize,
}

fn cast(scene: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut consider = |t: f64, texture: usize| {
        if t > HIT_EPSILON && best.is_none_or(|b| t < b.t) {
            best = Some(Hit { t, point: origin + dir * t, texture });
        }
    };
    for p in &scene.primitives {
        match p {
            Primitive::Plane { point, normal, texture } => {
                let n = Vector3::from(*normal);
                let denom = n.dot(dir);
                if denom.abs() > 1e-15 {
                    consider(n.dot(&(Vector3::from(*point) - origin)) / denom, *texture);
                }
            }
            Primitive::Sphere { center, radius, texture } => {
                let oc = origin - Vector3::from(*center);
                let a = dir.dot(dir);
                let b = 2.0 * dir.dot(&oc);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    let t0 = (-b - sq) / (2.0 * a);
                    let t1 = (-b + sq) / (2.0 * a);
                    consider(if t0 > HIT_EPSILON { t0 } else { t1 }, *texture);
                }
            }
            Primitive::Cuboid { min, max, texture } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if dir[a].abs() < 1e-15 {
                        if origin[a] < min[a] || origin[a] > max[a] {
                            t1 = f64::NEG_INFINITY;
                        }
                        continue;
                    }
                    let (ta, tb) = ((min[a] - origin[a]) / dir[a], (max[a] - origin[a]) / dir[a]);
                    t0 = t0.max(ta.min(tb));
                    t1 = t1.min(ta.max(tb));
                }
                if t0 <= t1 {
                    consider(if t0 > HIT_EPSILON { t0 } else { t1 }, *texture);
                }
            }
        }
    }
    best
}

/// World-space ray through pixel centre `(x, y)`; its camera-frame z
/// component is 1, so the hit parameter equals the z-depth.
fn pixel_ray(x: usize, y: usize, pose: &RigidPose, k: &CameraIntrinsics) -> Vector3<f64> {
    let d = Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
    pose.rotation() * d
}

fn render_rows<T: Send + Clone>(k: &CameraIntrinsics, f: impl Fn(usize, usize) -> T + Sync) -> Vec<T> {
    (0..k.height)
        .into_par_iter()
        .flat_map_iter(|y| (0..k.width).map(move |x| (x, y)).collect::<Vec<_>>())
        .map(|(x, y)| f(x, y))
        .collect()
}

/// Z-depth of the nearest surface per pixel; 0 where the ray hits nothing.
/// `pose` is camera-to-world.
pub fn render_depth(scene: &SceneSpec, pose: &RigidPose, k: &CameraIntrinsics) -> DepthMap {
    let origin = *pose.translation();
    let values = render_rows(k, |x, y| cast(scene, &origin, &pixel_ray(x, y, pose, k)).map_or(0.0, |h| h.t));
    DepthMap::from_values(k.width, k.height, values).expect("rendered buffer matches intrinsics")
}

/// Procedural colour of the nearest surface per pixel; black on a miss.
pub fn render_color(scene: &SceneSpec, pose: &RigidPose, k: &CameraIntrinsics) -> ColorImage {
    let origin = *pose.translation();
    let data = render_rows(k, |x, y| {
        cast(scene, &origin, &pixel_ray(x, y, pose, k)).map_or([0.0; 3], |h| shade(&scene.textures[h.texture], &h.point))
    });
    let mut img = ColorImage::new(k.width, k.height);
    for (i, rgb) in data.into_iter().enumerate() {
        img.set(i % k.width, i / k.width, rgb);
    }
    img
}

/// Exact depth and colour of a single pixel centre.
pub fn trace_pixel(scene: &SceneSpec, pose: &RigidPose, k: &CameraIntrinsics, q: PixelCoord) -> Option<(f64, [f64; 3])> {
    let d = Vector3::new((q.u - k.cx) / k.fx, (q.v - k.cy) / k.fy, 1.0);
    let hit = cast(scene, pose.translation(), &(pose.rotation() * d))?;
    Some((hit.t, shade(&scene.textures[hit.texture], &hit.point)))
}

fn shade(tex: &Texture, p: &Vector3<f64>) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let n = fbm(tex.seed.wrapping_add(c as u64 * 0x9E37), p / tex.cell, tex.octaves);
        *o = (tex.base[c] + tex.contrast * (n - 0.5) * 2.0).clamp(0.0, 1.0);
    }
    out
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn lattice(seed: u64, x: i64, y: i64, z: i64) -> f64 {
    let h = splitmix64(seed ^ splitmix64((x as u64) ^ splitmix64((y as u64) ^ splitmix64(z as u64))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(seed: u64, p: Vector3<f64>) -> f64 {
    let (fx, fy, fz) = (p.x.floor(), p.y.floor(), p.z.floor());
    let (x0, y0, z0) = (fx as i64, fy as i64, fz as i64);
    let s = |t: f64| t * t * (3.0 - 2.0 * t);
    let (tx, ty, tz) = (s(p.x - fx), s(p.y - fy), s(p.z - fz));
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let mut acc = [0.0; 4];
    for (i, a) in acc.iter_mut().enumerate() {
        let (dy, dz) = ((i & 1) as i64, (i >> 1) as i64);
        *a = lerp(lattice(seed, x0, y0 + dy, z0 + dz), lattice(seed, x0 + 1, y0 + dy, z0 + dz), tx);
    }
    lerp(lerp(acc[0], acc[1], ty), lerp(acc[2], acc[3], ty), tz)
}

/// Fractal sum of value noise in `[0, 1]`.
fn fbm(seed: u64, p: Vector3<f64>, octaves: u32) -> f64 {
    let mut sum = 0.0;
    let mut norm = 0.0;
    let mut amp = 1.0;
    let mut freq = 1.0;
    for o in 0..octaves.max(1) {
        sum += amp * value_noise(seed.wrapping_add(o as u64 * 0x632B_E59B), p * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    sum / norm
}

/// Uniformly samples `n` valid pixels without replacement, in row-major
/// order. Returns every valid pixel when `n` exceeds the valid count.
pub fn sample_sparse(depth: &DepthMap, n: usize, seed: u64) -> SparseDepthMap {
    let valid: Vec<usize> = depth.values().iter().enumerate().filter(|(_, &d)| d > 0.0).map(|(i, _)| i).collect();
    let mut chosen: Vec<usize> = if n >= valid.len() {
        valid
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, valid.len(), n).into_iter().map(|i| valid[i]).collect()
    };
    chosen.sort_unstable();
    let w = depth.width();
    let samples = chosen
        .into_iter()
        .map(|i| SparseSample { coord: PixelCoord::new((i % w) as f64, (i / w) as f64), depth: depth.values()[i] })
        .collect();
    SparseDepthMap::new(depth.width(), depth.height(), samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub lambda: f64,
    pub seed: u64,
}

/// Draws `q̂_i ~ N(q_i, (λ q_i)²)` per component of the 6-DoF vector
/// `(t, r)` and rebuilds the pose.
pub fn perturb_pose(q: &[f64; 6], lambda: f64, seed: u64) -> RigidPose {
    assert!(lambda >= 0.0, "lambda must be non-negative");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = *q;
    for v in out.iter_mut() {
        let z: f64 = standard.sample(&mut rng);
        *v += lambda * v.abs() * z;
    }
    RigidPose::from_vector(&out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frames: Vec<(f64, RigidPose)>,
}

impl Trajectory {
    pub fn new(frames: Vec<(f64, RigidPose)>) -> Result<Self, SceneError> {
        if frames.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(SceneError::InvalidTrajectory("timestamps must be strictly increasing".into()));
        }
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &[(f64, RigidPose)] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Cameras moving linearly from `eye0` to `eye1` while looking from
    /// `look0` to `look1`, at 30 Hz.
    pub fn linear(
        n: usize,
        eye: (Vector3<f64>, Vector3<f64>),
        look: (Vector3<f64>, Vector3<f64>),
    ) -> Result<Self, SceneError> {
        let up = Vector3::new(0.0, -1.0, 0.0);
        let frames = (0..n)
            .map(|i| {
                let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                let e = eye.0 + (eye.1 - eye.0) * t;
                let l = look.0 + (look.1 - look.0) * t;
                RigidPose::look_at(e, l, up)
                    .map(|p| (i as f64 / 30.0, p))
                    .map_err(|e| SceneError::InvalidTrajectory(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(frames)
    }
}

/// `m` with `tau = 1/m`.
pub fn tau_period(tau: f64) -> Result<usize, SceneError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(SceneError::InvalidTau(tau));
    }
    let m = (1.0 / tau).round();
    if (1.0 / m - tau).abs() > 1e-9 {
        return Err(SceneError::InvalidTau(tau));
    }
    Ok(m as usize)
}

/// Seed for stream `stream` of frame `index`.
pub fn frame_seed(seed: u64, stream: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(stream ^ splitmix64(index as u64)))
}

pub const SPARSE_STREAM: u64 = 1;
pub const POSE_NOISE_STREAM: u64 = 2;

/// Renders every frame; frames `0, m, 2m, ...` get `n_points` sparse depth
/// samples. Colours are quantised to 8 bits.
pub fn generate_sequence(
    scene: &SceneSpec,
    k: &CameraIntrinsics,
    traj: &Trajectory,
    tau: f64,
    n_points: usize,
    seed: u64,
) -> Result<Sequence, SceneError> {
    scene.validate()?;
    k.validate().map_err(|e| SceneError::InvalidScene(e.to_string()))?;
    let m = tau_period(tau)?;
    let frames = traj
        .frames()
        .par_iter()
        .enumerate()
        .map(|(i, (ts, pose))| {
            let gt = render_depth(scene, pose, k);
            let color = render_color(scene, pose, k).quantized();
            let sparse = (i % m == 0).then(|| sample_sparse(&gt, n_points, frame_seed(seed, SPARSE_STREAM, i)));
            Frame { index: i, timestamp: *ts, pose: *pose, color, gt_depth: Some(gt), sparse }
        })
        .collect();
    Ok(Sequence { intrinsics: *k, frames })
}

/// One entry of the committed synthetic suite.
#[derive(Debug, Clone)]
pub struct SuiteScene {
    pub name: String,
    pub scene: SceneSpec,
    pub intrinsics: CameraIntrinsics,
    pub trajectory: Trajectory,
}

impl SuiteScene {
    pub fn generate(&self, tau: f64, n_points: usize, seed: u64) -> Result<Sequence, SceneError> {
        generate_sequence(&self.scene, &self.intrinsics, &self.trajectory, tau, n_points, seed)
    }
}

fn palette(seed: u64, cell: f64) -> Texture {
    let h = splitmix64(seed);
    let base = [
        0.35 + 0.3 * ((h & 0xff) as f64 / 255.0),
        0.35 + 0.3 * (((h >> 8) & 0xff) as f64 / 255.0),
        0.35 + 0.3 * (((h >> 16) & 0xff) as f64 / 255.0),
    ];
    Texture { seed, cell, octaves: 3, base, contrast: 0.45 }
}

fn intrinsics(width: usize, height: usize) -> CameraIntrinsics {
    let f = 0.9 * width as f64;
    CameraIntrinsics::new(f, f, (width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0, width, height)
        .expect("suite intrinsics are valid")
}

/// The eight fixed scenes used for experiments and acceptance checks.
pub fn synthetic_suite() -> Vec<SuiteScene> {
    let v = Vector3::new;
    let mut out = Vec::new();
    let room = |seed: u64, cell: f64, size: [f64; 3]| {
        let mut s = SceneSpec { primitives: Vec::new(), textures: (0..6).map(|i| palette(seed * 16 + i, cell)).collect() };
        s.add_box_room([-size[0], -size[1], -1.0], [size[0], size[1], size[2]], [0, 1, 2, 3, 4, 5]);
        s
    };
    let mut push = |name: &str, scene: SceneSpec, (w, h): (usize, usize), n: usize, eye: (Vector3<f64>, Vector3<f64>), look: (Vector3<f64>, Vector3<f64>)| {
        out.push(SuiteScene {
            name: name.to_string(),
            scene,
            intrinsics: intrinsics(w, h),
            trajectory: Trajectory::linear(n, eye, look).expect("suite trajectory is valid"),
        });
    };

    // Empty room, walking towards the back wall.
    push("room_walk", room(1, 0.35, [2.0, 1.5, 5.0]), (128, 96), 11, (v(-0.3, 0.0, 0.0), v(0.3, 0.1, 1.6)), (v(0.0, 0.0, 5.0), v(0.2, 0.0, 5.0)));

    let mut s = room(2, 0.3, [2.5, 1.5, 6.0]);
    s.textures.push(palette(201, 0.15));
    s.primitives.push(Primitive::Sphere { center: [0.4, 0.2, 3.5], radius: 0.7, texture: 6 });
    push("sphere_pass", s, (128, 96), 11, (v(-0.6, 0.0, 0.0), v(0.4, 0.0, 1.2)), (v(0.4, 0.2, 3.5), v(0.4, 0.2, 3.5)));

    // Textured boxes in front of a wall, camera sliding sideways.
    let mut s = SceneSpec {
        primitives: vec![Primitive::Plane { point: [0.0, 0.0, 4.5], normal: [0.0, 0.0, -1.0], texture: 0 }],
        textures: (0..4).map(|i| palette(300 + i, 0.15)).collect(),
    };
    for (i, (lo, hi)) in [([-1.2, -0.8, 2.5], [-0.2, 0.3, 3.0]), ([0.3, -0.5, 3.5], [1.5, 0.9, 4.0]), ([-0.6, 0.4, 2.0], [0.4, 1.2, 2.4])]
        .into_iter()
        .enumerate()
    {
        s.primitives.push(Primitive::Cuboid { min: lo, max: hi, texture: i + 1 });
    }
    push("layers", s, (256, 192), 11, (v(-0.75, 0.0, 0.0), v(0.75, 0.0, 0.0)), (v(-0.75, 0.0, 5.0), v(0.75, 0.0, 5.0)));

    let mut s = room(4, 0.3, [2.0, 1.2, 4.0]);
    s.textures.push(palette(401, 0.2));
    s.primitives.push(Primitive::Plane { point: [0.0, 0.0, 2.5], normal: [0.6, 0.0, -0.8], texture: 6 });
    push("slanted_wall", s, (96, 96), 11, (v(-0.4, 0.0, -0.5), v(0.2, 0.1, 0.8)), (v(0.0, 0.0, 3.0), v(0.0, 0.0, 3.0)));

    let mut s = room(5, 0.5, [4.0, 2.0, 9.0]);
    s.textures.push(palette(501, 0.3));
    for (i, c) in [[-1.5, 1.0, 4.0], [1.2, 0.8, 5.5], [0.0, 1.3, 7.0]].iter().enumerate() {
        s.primitives.push(Primitive::Sphere { center: *c, radius: 0.6 + 0.1 * i as f64, texture: 6 });
    }
    push("hall", s, (192, 128), 11, (v(0.0, 0.0, 0.0), v(0.3, 0.0, 2.5)), (v(0.0, 0.3, 8.0), v(0.3, 0.3, 8.0)));

    let mut s = room(6, 0.25, [1.5, 1.5, 3.0]);
    s.textures.push(palette(601, 0.12));
    s.primitives.push(Primitive::Sphere { center: [0.0, 0.0, 2.0], radius: 0.5, texture: 6 });
    push("small_room", s, (64, 64), 11, (v(-0.3, 0.0, -0.5), v(0.2, 0.0, 0.6)), (v(0.0, 0.0, 2.0), v(0.0, 0.0, 2.0)));

    let mut s = room(7, 0.45, [3.0, 2.0, 8.0]);
    s.textures.push(palette(701, 0.25));
    s.primitives.push(Primitive::Plane { point: [0.0, 1.0, 0.0], normal: [0.0, -0.9701425001453319, 0.24253562503633297], texture: 6 });
    push("ramp", s, (256, 192), 11, (v(0.2, -0.5, 0.0), v(-0.2, -0.4, 2.0)), (v(0.0, 0.0, 7.0), v(0.0, 0.0, 7.0)));

    let mut s = room(8, 0.35, [2.5, 1.5, 5.5]);
    s.textures.push(palette(801, 0.18));
    s.textures.push(palette(802, 0.22));
    s.primitives.push(Primitive::Sphere { center: [0.8, 0.4, 2.8], radius: 0.45, texture: 6 });
    s.primitives.push(Primitive::Sphere { center: [-0.7, -0.2, 4.0], radius: 0.75, texture: 7 });
    push("orbit", s, (128, 128), 11, (v(-0.8, 0.0, 0.0), v(0.8, 0.0, 0.8)), (v(0.0, 0.0, 3.5), v(0.0, 0.0, 3.5)));

    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn k(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(50.0, 50.0, 20.0, 15.0, w, h).unwrap()
    }

    fn single_texture() -> Vec<Texture> {
        vec![palette(1, 0.3)]
    }

    #[test]
    fn fronto_parallel_plane_has_constant_depth() {
        let scene = SceneSpec {
            primitives: vec![Primitive::Plane { point: [0.0, 0.0, 3.0], normal: [0.0, 0.0, -1.0], texture: 0 }],
            textures: single_texture(),
        };
        let d = render_depth(&scene, &RigidPose::identity(), &k(40, 30));
        for &v in d.values() {
            assert_relative_eq!(v, 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn on_axis_sphere_front_is_at_four() {
        let scene = SceneSpec {
            primitives: vec![Primitive::Sphere { center: [0.0, 0.0, 5.0], radius: 1.0, texture: 0 }],
            textures: single_texture(),
        };
        let d = render_depth(&scene, &RigidPose::identity(), &k(41, 31));
        assert_relative_eq!(d.get(20, 15), 4.0, epsilon = 1e-12);
        // corner rays miss the sphere
        assert_eq!(d.get(0, 0), 0.0);
        let c = render_color(&scene, &RigidPose::identity(), &k(41, 31));
        assert_eq!(c.get(0, 0), [0.0; 3]);
    }

    #[test]
    fn texture_is_world_anchored() {
        let scene = SceneSpec {
            primitives: vec![Primitive::Plane { point: [0.0, 0.0, 3.0], normal: [0.0, 0.0, -1.0], texture: 0 }],
            textures: single_texture(),
        };
        let kk = k(40, 30);
        let a = trace_pixel(&scene, &RigidPose::identity(), &kk, PixelCoord::new(20.0, 15.0)).unwrap();
        let moved = RigidPose::from_translation(Vector3::new(0.3, 0.0, -1.0));
        // world point (0,0,3) seen from (0.3, 0, -1) at depth 4
        let q = PixelCoord::new(20.0 - 50.0 * 0.3 / 4.0, 15.0);
        let b = trace_pixel(&scene, &moved, &kk, q).unwrap();
        assert_relative_eq!(b.0, 4.0, epsilon = 1e-12);
        for c in 0..3 {
            assert_relative_eq!(a.1[c], b.1[c], epsilon = 1e-9);
        }
    }

    #[test]
    fn sparse_sampling_counts() {
        let d = DepthMap::constant(30, 30, 2.0);
        assert_eq!(sample_sparse(&d, 500, 3).len(), 500);
        assert_eq!(sample_sparse(&d, 0, 3).len(), 0);
        let mut small = DepthMap::new(20, 20);
        for i in 0..100 {
            small.set(i % 20, i / 20, 1.0);
        }
        assert_eq!(sample_sparse(&small, 1_000_000, 3).len(), 100);
        assert_eq!(sample_sparse(&d, 50, 9), sample_sparse(&d, 50, 9));
        assert_ne!(sample_sparse(&d, 50, 9), sample_sparse(&d, 50, 10));
    }

    #[test]
    fn zero_lambda_keeps_pose() {
        let q = [0.1, -0.2, 0.3, 0.05, -0.02, 0.4];
        assert_eq!(perturb_pose(&q, 0.0, 5), RigidPose::from_vector(&q));
    }

    #[test]
    fn zero_component_is_never_perturbed() {
        let q = [0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        for seed in 0..20 {
            let p = perturb_pose(&q, 0.5, seed);
            assert_eq!(p.translation().x, 0.0);
            assert_eq!(p.translation().z, 0.0);
        }
    }

    #[test]
    fn perturbation_mean_is_unbiased() {
        let q = [0.5, -1.0, 2.0, 0.1, -0.2, 0.3];
        let lambda = 0.3;
        let n = 10_000;
        let mut sums = [0.0; 6];
        for seed in 0..n {
            let p = perturb_pose(&q, lambda, seed);
            let t = p.translation();
            sums[0] += t.x;
            sums[1] += t.y;
            sums[2] += t.z;
            // rotations are small enough that the Euler angles round-trip
            let r = p.euler_xyz();
            for i in 0..3 {
                sums[3 + i] += r[i];
            }
        }
        for i in 0..6 {
            let mean = sums[i] / n as f64;
            let se = lambda * q[i].abs() / (n as f64).sqrt();
            assert!((mean - q[i]).abs() < 4.0 * se, "component {i}: mean {mean} vs {}", q[i]);
        }
    }

    #[test]
    fn tau_schedule() {
        let suite = synthetic_suite();
        let s = &suite[5];
        let traj = Trajectory::new(s.trajectory.frames()[..10].to_vec()).unwrap();
        let seq = generate_sequence(&s.scene, &s.intrinsics, &traj, 0.2, 50, 1).unwrap();
        assert_eq!(seq.depth_frames(), vec![0, 5]);
        let seq = generate_sequence(&s.scene, &s.intrinsics, &traj, 0.1, 50, 1).unwrap();
        assert_eq!(seq.depth_frames(), vec![0]);
        let seq = generate_sequence(&s.scene, &s.intrinsics, &traj, 1.0, 50, 1).unwrap();
        assert_eq!(seq.depth_frames().len(), 10);
        assert!(seq.frames.iter().all(|f| f.gt_depth.is_some()));
        for bad in [0.0, 1.5, 0.3, -1.0] {
            assert!(matches!(generate_sequence(&s.scene, &s.intrinsics, &traj, bad, 5, 1), Err(SceneError::InvalidTau(_))));
        }
    }

    #[test]
    fn suite_rooms_are_closed_and_valid() {
        let suite = synthetic_suite();
        assert_eq!(suite.len(), 8);
        for s in &suite {
            s.scene.validate().unwrap();
            let (w, h) = (s.intrinsics.width, s.intrinsics.height);
            assert!(w % 8 == 0 && h % 8 == 0 && (64..=256).contains(&w) && (64..=256).contains(&h));
            for (_, pose) in s.trajectory.frames() {
                let d = render_depth(&s.scene, pose, &s.intrinsics);
                assert_eq!(d.valid_count(), w * h, "{} has holes", s.name);
            }
        }
    }
}
