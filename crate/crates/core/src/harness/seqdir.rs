use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::geometry::{CameraIntrinsics, DepthMap, PixelCoord, RigidPose, SparseDepthMap, SparseSample};
use crate::raster::ColorImage;
use crate::sequence::{Frame, Sequence};

/// Depth PNG units per metre.
pub const DEPTH_SCALE: f64 = 1000.0;

#[derive(Debug, Serialize, Deserialize)]
struct PosesFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamps: Option<Vec<f64>>,
    poses: Vec<[[f64; 4]; 4]>,
}

fn frame_name(index: usize, ext: &str) -> String {
    format!("{index:06}.{ext}")
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn write_depth_png(path: &Path, depth: &DepthMap) -> Result<(), HarnessError> {
    let mut raw = Vec::with_capacity(depth.values().len());
    for &d in depth.values() {
        let mm = (d * DEPTH_SCALE).round();
        if mm > u16::MAX as f64 {
            return Err(HarnessError::format(path, format!("depth {d} m exceeds the 16-bit range")));
        }
        raw.push(mm as u16);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw).expect("buffer matches size");
    img.save(path).map_err(|e| HarnessError::format(path, e))
}

fn read_depth_png(path: &Path, k: &CameraIntrinsics) -> Result<DepthMap, HarnessError> {
    let img = image::open(path).map_err(|e| HarnessError::format(path, e))?;
    let img = match img {
        image::DynamicImage::ImageLuma16(i) => i,
        other => return Err(HarnessError::format(path, format!("expected 16-bit grayscale, got {:?}", other.color()))),
    };
    check_size(path, img.width() as usize, img.height() as usize, k)?;
    let values = img.into_raw().into_iter().map(|v| v as f64 / DEPTH_SCALE).collect();
    DepthMap::from_values(k.width, k.height, values).map_err(|e| HarnessError::format(path, e))
}

fn check_size(path: &Path, w: usize, h: usize, k: &CameraIntrinsics) -> Result<(), HarnessError> {
    if (w, h) != (k.width, k.height) {
        return Err(HarnessError::format(path, format!("image is {w}x{h}, intrinsics say {}x{}", k.width, k.height)));
    }
    Ok(())
}

fn write_sparse_csv(path: &Path, sparse: &SparseDepthMap) -> Result<(), HarnessError> {
    let mut s = String::from("u,v,depth_m\n");
    for p in &sparse.samples {
        writeln!(s, "{},{},{}", p.coord.u, p.coord.v, p.depth).expect("string write");
    }
    write_file(path, s.as_bytes())
}

fn read_sparse_csv(path: &Path, k: &CameraIntrinsics) -> Result<SparseDepthMap, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("u,v,depth_m") {
        return Err(HarnessError::format(path, "header must be u,v,depth_m"));
    }
    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| HarnessError::format(path, format!("row {}: {e}", n + 1)))?;
        let [u, v, d] = vals[..] else {
            return Err(HarnessError::format(path, format!("row {}: expected 3 columns", n + 1)));
        };
        if !(d.is_finite() && d > 0.0) {
            return Err(HarnessError::format(path, format!("row {}: depth must be positive", n + 1)));
        }
        samples.push(SparseSample { coord: PixelCoord::new(u, v), depth: d });
    }
    Ok(SparseDepthMap::new(k.width, k.height, samples))
}

/// Every valid pixel of a dense depth map as a sparse sample.
fn dense_to_sparse(depth: &DepthMap) -> SparseDepthMap {
    let w = depth.width();
    let samples = depth
        .values()
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(i, &d)| SparseSample { coord: PixelCoord::new((i % w) as f64, (i / w) as f64), depth: d })
        .collect();
    SparseDepthMap::new(depth.width(), depth.height(), samples)
}

/// Writes a sequence directory. Depth-bearing frames get `depth/` (the
/// dense sensor frame, taken from ground truth) and `sparse/`; ground truth
/// for every frame goes to `gt/`.
pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<(), HarnessError> {
    for sub in ["color", "depth", "sparse", "gt"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| HarnessError::io(&p, e))?;
    }
    let k_json = serde_json::to_string_pretty(&seq.intrinsics).expect("intrinsics serialise");
    write_file(&dir.join("intrinsics.json"), k_json.as_bytes())?;
    let poses = PosesFile {
        timestamps: Some(seq.frames.iter().map(|f| f.timestamp).collect()),
        poses: seq
            .frames
            .iter()
            .map(|f| {
                let m = f.pose.to_row_major();
                [0, 1, 2, 3].map(|r| [m[4 * r], m[4 * r + 1], m[4 * r + 2], m[4 * r + 3]])
            })
            .collect(),
    };
    write_file(&dir.join("poses.json"), serde_json::to_string(&poses).expect("poses serialise").as_bytes())?;
    for (i, f) in seq.frames.iter().enumerate() {
        if f.index != i {
            return Err(HarnessError::InvalidConfig(format!("frame indices must be dense, found {} at {i}", f.index)));
        }
        let path = dir.join("color").join(frame_name(i, "png"));
        let img = RgbImage::from_raw(f.color.width() as u32, f.color.height() as u32, f.color.to_rgb8()).expect("rgb buffer");
        img.save(&path).map_err(|e| HarnessError::format(&path, e))?;
        if let Some(gt) = &f.gt_depth {
            write_depth_png(&dir.join("gt").join(frame_name(i, "png")), gt)?;
            if f.has_depth() {
                write_depth_png(&dir.join("depth").join(frame_name(i, "png")), gt)?;
            }
        }
        if let Some(sparse) = &f.sparse {
            write_sparse_csv(&dir.join("sparse").join(frame_name(i, "csv")), sparse)?;
        }
    }
    Ok(())
}

/// Reads a sequence directory. A frame is depth-bearing when it has
/// `sparse/` or `depth/`; the CSV takes precedence, otherwise every valid
/// depth pixel becomes a sample. Ground truth comes from `gt/`, falling back
/// to `depth/`.
pub fn load_sequence(dir: &Path) -> Result<Sequence, HarnessError> {
    let k_path = dir.join("intrinsics.json");
    if !k_path.is_file() {
        return Err(HarnessError::MissingIntrinsics(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&k_path).map_err(|e| HarnessError::io(&k_path, e))?;
    let k: CameraIntrinsics = serde_json::from_str(&text).map_err(|e| HarnessError::format(&k_path, e))?;
    k.validate().map_err(|e| HarnessError::format(&k_path, e))?;

    let p_path = dir.join("poses.json");
    if !p_path.is_file() {
        return Err(HarnessError::MissingPose(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&p_path).map_err(|e| HarnessError::io(&p_path, e))?;
    let poses: PosesFile = serde_json::from_str(&text).map_err(|e| HarnessError::format(&p_path, e))?;
    if let Some(ts) = &poses.timestamps {
        if ts.len() != poses.poses.len() {
            return Err(HarnessError::format(&p_path, "timestamps and poses differ in length"));
        }
    }

    let mut frames = Vec::with_capacity(poses.poses.len());
    for (i, rows) in poses.poses.iter().enumerate() {
        let flat: [f64; 16] = std::array::from_fn(|j| rows[j / 4][j % 4]);
        let pose = RigidPose::from_row_major(&flat).map_err(|e| HarnessError::format(&p_path, format!("pose {i}: {e}")))?;
        let c_path = dir.join("color").join(frame_name(i, "png"));
        let color = read_color(&c_path, &k)?;
        let depth_path = dir.join("depth").join(frame_name(i, "png"));
        let depth = depth_path.is_file().then(|| read_depth_png(&depth_path, &k)).transpose()?;
        let gt_path = dir.join("gt").join(frame_name(i, "png"));
        let gt = gt_path.is_file().then(|| read_depth_png(&gt_path, &k)).transpose()?;
        let s_path = dir.join("sparse").join(frame_name(i, "csv"));
        let sparse = if s_path.is_file() {
            Some(read_sparse_csv(&s_path, &k)?)
        } else {
            depth.as_ref().map(dense_to_sparse)
        };
        frames.push(Frame {
            index: i,
            timestamp: poses.timestamps.as_ref().map_or(i as f64 / 30.0, |t| t[i]),
            pose,
            color,
            gt_depth: gt.or(depth),
            sparse,
        });
    }
    Ok(Sequence { intrinsics: k, frames })
}

fn read_color(path: &PathBuf, k: &CameraIntrinsics) -> Result<ColorImage, HarnessError> {
    if !path.is_file() {
        return Err(HarnessError::format(path, "missing colour image"));
    }
    let img = image::open(path).map_err(|e| HarnessError::format(path, e))?;
    let img = match img {
        image::DynamicImage::ImageRgb8(i) => i,
        other => return Err(HarnessError::format(path, format!("expected 8-bit RGB, got {:?}", other.color()))),
    };
    check_size(path, img.width() as usize, img.height() as usize, k)?;
    Ok(ColorImage::from_rgb8(k.width, k.height, img.as_raw()).expect("size checked"))
}
