use std::collections::HashMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mc_tables::{CORNERS, EDGE_CONNECTION, TRIANGLE_CONNECTION};
use super::{EvalError, Point3, TsdfVolume};

/// Default surface sampling density in points per square metre.
pub const DEFAULT_DENSITY: f64 = 1.0e4;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub vertices: Vec<Point3>,
    pub triangles: Vec<[u32; 3]>,
}

impl Mesh {
    pub fn is_valid(&self) -> bool {
        let n = self.vertices.len() as u32;
        self.vertices.iter().all(|v| v.iter().all(|c| c.is_finite()))
            && self.triangles.iter().all(|t| t.iter().all(|&i| i < n))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i as usize]);
        let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let x = [e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0]];
        0.5 * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }
}

/// Marching cubes at iso-level 0 over cells whose eight corners are all observed.
pub fn extract_mesh(vol: &TsdfVolume) -> Result<Mesh, EvalError> {
    let [nx, ny, nz] = vol.dims();
    let mut mesh = Mesh::default();
    let mut edge_vertex: HashMap<(usize, usize), u32> = HashMap::new();
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(EvalError::EmptySurface);
    }
    for k in 0..nz - 1 {
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let corner = CORNERS.map(|c| (i + c[0], j + c[1], k + c[2]));
                if corner.iter().any(|&(a, b, c)| vol.weight(a, b, c) <= 0.0) {
                    continue;
                }
                let vals = corner.map(|(a, b, c)| vol.sdf(a, b, c));
                let mut case = 0usize;
                for (bit, v) in vals.iter().enumerate() {
                    if *v < 0.0 {
                        case |= 1 << bit;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLE_CONNECTION[case];
                for tri in row.chunks_exact(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let mut ids = [0u32; 3];
                    for (slot, &edge) in ids.iter_mut().zip(tri) {
                        let [c0, c1] = EDGE_CONNECTION[edge as usize];
                        let g0 = vol.index(corner[c0].0, corner[c0].1, corner[c0].2);
                        let g1 = vol.index(corner[c1].0, corner[c1].1, corner[c1].2);
                        let key = (g0.min(g1), g0.max(g1));
                        *slot = *edge_vertex.entry(key).or_insert_with(|| {
                            let p0 = vol.voxel_center(corner[c0].0, corner[c0].1, corner[c0].2);
                            let p1 = vol.voxel_center(corner[c1].0, corner[c1].1, corner[c1].2);
                            let (v0, v1) = (vals[c0], vals[c1]);
                            let t = if v0 == v1 { 0.5 } else { v0 / (v0 - v1) };
                            mesh.vertices.push([0, 1, 2].map(|a| p0[a] + t * (p1[a] - p0[a])));
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                        mesh.triangles.push(ids);
                    }
                }
            }
        }
    }
    if mesh.triangles.is_empty() {
        return Err(EvalError::EmptySurface);
    }
    Ok(mesh)
}

/// Uniform area-weighted surface samples, `density` points per square metre.
pub fn sample_points(mesh: &Mesh, density: f64, seed: u64) -> Result<Vec<Point3>, EvalError> {
    let areas: Vec<f64> = (0..mesh.triangles.len()).map(|t| mesh.triangle_area(t)).collect();
    let total: f64 = areas.iter().sum();
    let n = (total * density).round() as usize;
    if n == 0 {
        return Err(EvalError::EmptyPointSet);
    }
    let pick = WeightedIndex::new(&areas).map_err(|_| EvalError::EmptyPointSet)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let [a, b, c] = mesh.triangles[pick.sample(&mut rng)].map(|i| mesh.vertices[i as usize]);
            let (mut r1, mut r2): (f64, f64) = (rng.random(), rng.random());
            if r1 + r2 > 1.0 {
                r1 = 1.0 - r1;
                r2 = 1.0 - r2;
            }
            [0, 1, 2].map(|x| a[x] + r1 * (b[x] - a[x]) + r2 * (c[x] - a[x]))
        })
        .collect())
}
