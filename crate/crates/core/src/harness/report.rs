use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use super::{HarnessError, MeshConfig, RunReport, StageTimes, SweepAxis, SweepRow};
use crate::eval::{extract_mesh, metrics_3d, ply, sample_points, Mesh, Metrics2D, Metrics3D, Point3, TsdfVolume};
use crate::geometry::{backproject, DepthMap, PixelCoord, RigidPose};
use crate::sequence::Sequence;

fn join(values: impl IntoIterator<Item = f64>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn frames_csv(report: &RunReport) -> String {
    let mut s = format!("frame,source,sparse_points,{}\n", Metrics2D::FIELDS.join(","));
    for f in &report.frames {
        let metrics = f.metrics.map_or_else(|| [""; 6].join(","), |m| join(m.values()));
        writeln!(s, "{},{},{},{metrics}", f.index, f.source, f.sparse_points).expect("string write");
    }
    s
}

pub fn summary_csv(report: &RunReport) -> String {
    let mut s = format!("frames,skipped,{}", Metrics2D::FIELDS.join(","));
    if report.metrics_3d.is_some() {
        write!(s, ",{}", Metrics3D::FIELDS.join(",")).expect("string write");
    }
    let evaluated = report.frames.iter().filter(|f| f.metrics.is_some()).count();
    let agg = report.aggregate.map_or_else(|| [""; 6].join(","), |m| join(m.values()));
    write!(s, "\n{evaluated},{},{agg}", report.skipped.len()).expect("string write");
    if let Some(m3) = report.metrics_3d {
        write!(s, ",{}", join(m3.values())).expect("string write");
    }
    s.push('\n');
    s
}

pub fn iterations_csv(report: &RunReport) -> String {
    let mut s = String::from("iteration,mae_8\n");
    for (i, v) in report.mean_iteration_mae().iter().enumerate() {
        writeln!(s, "{i},{v}").expect("string write");
    }
    s
}

pub fn timings_csv(times: &StageTimes) -> String {
    format!("{}\n{}\n", StageTimes::FIELDS.join(","), join(times.millis()))
}

/// Writes `frames.csv`, `summary.csv`, `iterations.csv`, `timings.csv` and,
/// when present, `mesh.ply`.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    if let Some(mesh) = &report.mesh {
        write_mesh(mesh, &dir.join("mesh.ply"))?;
    }
    write_text(&dir.join("frames.csv"), &frames_csv(report))?;
    write_text(&dir.join("summary.csv"), &summary_csv(report))?;
    write_text(&dir.join("iterations.csv"), &iterations_csv(report))?;
    write_text(&dir.join("timings.csv"), &timings_csv(&report.timings))
}

pub fn sweep_csv(axis: SweepAxis, rows: &[SweepRow]) -> String {
    let mut s = format!("{},{},{},error\n", axis.name(), Metrics2D::FIELDS.join(","), StageTimes::FIELDS.join(","));
    for r in rows {
        match &r.result {
            Ok((m, t)) => writeln!(s, "{},{},{},", r.value, join(m.values()), join(t.millis())),
            Err(e) => writeln!(s, "{},{},{},\"{}\"", r.value, [""; 6].join(","), [""; 4].join(","), e.replace('"', "'")),
        }
        .expect("string write");
    }
    s
}

pub fn write_sweep(axis: SweepAxis, rows: &[SweepRow], path: &Path) -> Result<(), HarnessError> {
    write_text(path, &sweep_csv(axis, rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshOutput {
    pub mesh: Mesh,
    pub metrics: Option<Metrics3D>,
}

fn world_points(depth: &DepthMap, pose: &RigidPose, seq: &Sequence) -> Vec<Point3> {
    let k = &seq.intrinsics;
    let mut out = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let d = depth.get(x, y);
            if d > 0.0 {
                let p = pose.transform_point(&backproject(PixelCoord::new(x as f64, y as f64), d, k));
                out.push([p.x, p.y, p.z]);
            }
        }
    }
    out
}

fn fuse(maps: &[(&DepthMap, &RigidPose)], seq: &Sequence, cfg: &MeshConfig, bounds: (Point3, Point3)) -> Result<Mesh, HarnessError> {
    let mut vol = TsdfVolume::from_bounds(bounds.0, bounds.1, cfg.voxel, cfg.truncation_voxels * cfg.voxel);
    for (d, pose) in maps {
        vol.integrate(d, pose, &seq.intrinsics);
    }
    extract_mesh(&vol).map_err(|e| HarnessError::Numeric(e.to_string()))
}

/// Fuses the predictions of `report` into a TSDF with the sequence poses
/// and extracts a mesh. When every processed frame has ground truth, the
/// ground-truth depth is fused into an identical volume and the two
/// surfaces are compared with point-cloud metrics.
pub fn build_mesh(seq: &Sequence, report: &RunReport, cfg: &MeshConfig) -> Result<MeshOutput, HarnessError> {
    if report.frames.is_empty() {
        return Err(HarnessError::Numeric("no frames to fuse".into()));
    }
    let preds: Vec<(&DepthMap, &RigidPose)> =
        report.frames.iter().map(|f| (&f.prediction, &seq.frames[f.index].pose)).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (d, pose) in &preds {
        for p in world_points(d, pose, seq) {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
    }
    let pad = cfg.truncation_voxels * cfg.voxel;
    let bounds = (lo.map(|v| v - pad), hi.map(|v| v + pad));
    let mesh = fuse(&preds, seq, cfg, bounds)?;
    let gts: Option<Vec<(&DepthMap, &RigidPose)>> =
        report.frames.iter().map(|f| seq.frames[f.index].gt_depth.as_ref().map(|g| (g, &seq.frames[f.index].pose))).collect();
    let metrics = match gts {
        Some(gts) => {
            let gt_mesh = fuse(&gts, seq, cfg, bounds)?;
            let seed = report.config.seed;
            let a = sample_points(&mesh, cfg.density, seed).map_err(|e| HarnessError::Numeric(e.to_string()))?;
            let b = sample_points(&gt_mesh, cfg.density, seed ^ 1).map_err(|e| HarnessError::Numeric(e.to_string()))?;
            Some(metrics_3d(&a, &b, cfg.threshold).map_err(|e| HarnessError::Numeric(e.to_string()))?)
        }
        None => None,
    };
    Ok(MeshOutput { mesh, metrics })
}

pub fn write_mesh(mesh: &Mesh, path: &Path) -> Result<(), HarnessError> {
    let file = fs::File::create(path).map_err(|e| HarnessError::io(path, e))?;
    ply::write_ply(mesh, BufWriter::new(file)).map_err(|e| HarnessError::io(path, e))
}
