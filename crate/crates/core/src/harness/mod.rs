//! Sequence directories, pipeline runs, parameter sweeps and reports.

mod report;
mod seqdir;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{decode, Decoder};
use crate::encoding::{extract_features, extract_monocular, EncoderHandle, HypothesisSet};
use crate::eval::{metrics_2d, Mesh, Metrics2D, Metrics3D};
use crate::geometry::{reproject_sparse_depth, DepthMap, RigidPose, SparseDepthMap};
use crate::integrator::{run, IntegratorInputs, UpdateOperator, DEFAULT_ITERATIONS, FALLBACK_DEPTH};
use crate::model::{DodModel, ModelConfig};
use crate::nn::weights::{load_into, read_weights};
use crate::scene::{frame_seed, perturb_pose, tau_period, POSE_NOISE_STREAM, SPARSE_STREAM};
use crate::sequence::Sequence;

pub use report::{
    build_mesh, frames_csv, iterations_csv, summary_csv, sweep_csv, timings_csv, write_mesh, write_report, write_sweep, MeshOutput,
};
pub use seqdir::{load_sequence, save_sequence, DEPTH_SCALE};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("missing poses.json in {0}")]
    MissingPose(PathBuf),
    #[error("missing intrinsics.json in {0}")]
    MissingIntrinsics(PathBuf),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("frame {index}: {message}")]
    Frame { index: usize, message: String },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl HarnessError {
    /// Process exit code: 2 for input/format problems, 3 for numeric ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Frame { .. } | HarnessError::Numeric(_) => 3,
            _ => 2,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        HarnessError::Format { path: path.into(), reason: reason.to_string() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    #[default]
    Analytic,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    #[default]
    Default,
    Toy,
}

impl ModelSize {
    pub fn config(self) -> ModelConfig {
        match self {
            ModelSize::Default => ModelConfig::default(),
            ModelSize::Toy => ModelConfig::toy(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeshConfig {
    pub enabled: bool,
    pub voxel: f64,
    pub truncation_voxels: f64,
    /// Surface samples per square metre for point-cloud metrics.
    pub density: f64,
    pub threshold: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { enabled: false, voxel: 0.04, truncation_voxels: 3.0, density: 1.0e4, threshold: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Depth frames used are those with index divisible by `1/tau`.
    pub tau: f64,
    pub n_points: usize,
    pub iterations: usize,
    pub operator: OperatorKind,
    pub model: ModelSize,
    pub weights: Option<PathBuf>,
    pub lambda: f64,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub mesh: MeshConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            tau: 1.0,
            n_points: 500,
            iterations: DEFAULT_ITERATIONS,
            operator: OperatorKind::Analytic,
            model: ModelSize::Default,
            weights: None,
            lambda: 0.0,
            seed: 0,
            output: None,
            mesh: MeshConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        tau_period(self.tau).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(HarnessError::InvalidConfig(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if self.mesh.enabled && !(self.mesh.voxel > 0.0 && self.mesh.truncation_voxels > 0.0 && self.mesh.density > 0.0) {
            return Err(HarnessError::InvalidConfig("mesh voxel, truncation and density must be positive".into()));
        }
        if self.operator == OperatorKind::Analytic && self.weights.is_some() {
            return Err(HarnessError::InvalidConfig("weights given for the analytic operator".into()));
        }
        Ok(())
    }
}

/// The four inference components.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub geometry: EncoderHandle,
    pub mono: EncoderHandle,
    pub operator: UpdateOperator,
    pub decoder: Decoder,
}

impl Pipeline {
    pub fn analytic() -> Self {
        Self {
            geometry: EncoderHandle::Descriptor,
            mono: EncoderHandle::Descriptor,
            operator: UpdateOperator::analytic(),
            decoder: Decoder::Uniform,
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self, HarnessError> {
        match cfg.operator {
            OperatorKind::Analytic => Ok(Self::analytic()),
            OperatorKind::Learned => {
                let mut model = DodModel::new(cfg.model.config(), cfg.seed);
                if let Some(path) = &cfg.weights {
                    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
                    let loaded = read_weights(std::io::BufReader::new(file)).map_err(|e| HarnessError::format(path, e))?;
                    load_into(&mut model.params, &loaded).map_err(|e| HarnessError::format(path, e))?;
                }
                let h = model.handles();
                Ok(Self { geometry: h.geometry, mono: h.mono, operator: h.operator, decoder: h.decoder })
            }
        }
    }
}

/// Wall-clock time per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimes {
    pub encode: Duration,
    pub volume: Duration,
    pub integrate: Duration,
    pub decode: Duration,
}

impl StageTimes {
    pub const FIELDS: [&'static str; 4] = ["encode_ms", "volume_ms", "integrate_ms", "decode_ms"];

    pub fn millis(&self) -> [f64; 4] {
        [self.encode, self.volume, self.integrate, self.decode].map(|d| d.as_secs_f64() * 1e3)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub index: usize,
    pub source: usize,
    /// Reprojected sparse samples that landed in the target view.
    pub sparse_points: usize,
    pub prediction: DepthMap,
    /// Ground-truth metrics at full resolution, when ground truth exists.
    pub metrics: Option<Metrics2D>,
    /// 1/8-resolution MAE of the initialisation followed by every iterate.
    pub iteration_mae: Vec<f64>,
    pub times: StageTimes,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: RunConfig,
    pub frames: Vec<FrameResult>,
    pub skipped: Vec<usize>,
    pub aggregate: Option<Metrics2D>,
    pub metrics_3d: Option<Metrics3D>,
    /// Mesh fused from the predictions when meshing is enabled.
    pub mesh: Option<Mesh>,
    /// Mean stage times with the first processed frame excluded.
    pub timings: StageTimes,
}

impl RunReport {
    /// Mean 1/8 MAE per iteration over frames with ground truth.
    pub fn mean_iteration_mae(&self) -> Vec<f64> {
        let rows: Vec<&Vec<f64>> = self.frames.iter().filter(|f| !f.iteration_mae.is_empty()).map(|f| &f.iteration_mae).collect();
        let Some(first) = rows.first() else { return Vec::new() };
        (0..first.len()).map(|i| rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64).collect()
    }
}

/// Keeps at most `n` samples, chosen uniformly with a seeded draw and kept
/// in their original order.
pub fn limit_points(sparse: &SparseDepthMap, n: usize, seed: u64) -> SparseDepthMap {
    if sparse.len() <= n {
        return sparse.clone();
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, sparse.len(), n).into_vec();
    idx.sort_unstable();
    SparseDepthMap::new(sparse.width, sparse.height, idx.into_iter().map(|i| sparse.samples[i]).collect())
}

/// Applies `tau`, `n_points` and pose noise to a sequence: only frames with
/// index divisible by `1/tau` keep their depth, each keeps at most `n_points`
/// samples, and with `lambda > 0` every absolute pose is perturbed
/// independently.
pub fn prepare_sequence(seq: &Sequence, cfg: &RunConfig) -> Result<Sequence, HarnessError> {
    cfg.validate()?;
    let m = tau_period(cfg.tau).map_err(|e| HarnessError::InvalidConfig(e.to_string()))?;
    let mut out = seq.clone();
    for f in &mut out.frames {
        f.sparse = if f.index % m == 0 {
            f.sparse.as_ref().map(|s| limit_points(s, cfg.n_points, frame_seed(cfg.seed, SPARSE_STREAM, f.index)))
        } else {
            None
        };
        if cfg.lambda > 0.0 {
            f.pose = perturb_pose(&f.pose.to_vector(), cfg.lambda, frame_seed(cfg.seed, POSE_NOISE_STREAM, f.index));
        }
    }
    Ok(out)
}

fn frame_error(index: usize) -> impl Fn(String) -> HarnessError {
    move |message| HarnessError::Frame { index, message }
}

/// Densifies one target frame from its source frame.
pub fn process_frame(seq: &Sequence, target: usize, source: usize, iterations: usize, pipe: &Pipeline) -> Result<FrameResult, HarnessError> {
    let err = frame_error(target);
    let k = seq.intrinsics;
    let (tf, sf) = (&seq.frames[target], &seq.frames[source]);
    let sparse = sf.sparse.as_ref().ok_or_else(|| err("source frame has no depth".into()))?;
    let target_to_source = RigidPose::relative(&tf.pose, &sf.pose);
    let moved = reproject_sparse_depth(sparse, &target_to_source.inverse(), &k);
    let sparse8 = moved.map.rasterize(8);

    let t0 = Instant::now();
    let ft = extract_features(&tf.color, &pipe.geometry).map_err(|e| err(e.to_string()))?;
    let fs = extract_features(&sf.color, &pipe.geometry).map_err(|e| err(e.to_string()))?;
    let pyramid = extract_monocular(&tf.color, &pipe.mono).map_err(|e| err(e.to_string()))?;
    let encode = t0.elapsed();

    let inputs = IntegratorInputs {
        target_features: &ft,
        source_features: &fs,
        mono8: pyramid.level(8),
        sparse: &sparse8,
        k8: k.scaled(8),
        target_to_source,
        hypotheses: HypothesisSet::default(),
        fallback: FALLBACK_DEPTH,
    };
    let out = run(&inputs, iterations, &pipe.operator).map_err(|e| err(e.to_string()))?;

    let t1 = Instant::now();
    let prediction = decode(out.final_depth(), out.final_hidden(), &pyramid, &pipe.decoder).map_err(|e| err(e.to_string()))?;
    let decode_time = t1.elapsed();
    if prediction.values().iter().any(|v| !v.is_finite()) || prediction.valid_count() != prediction.values().len() {
        return Err(HarnessError::Numeric(format!("frame {target}: non-finite or non-positive prediction")));
    }

    let (metrics, iteration_mae) = match &tf.gt_depth {
        Some(gt) => {
            let m = metrics_2d(&prediction, gt).ok();
            let gt8 = gt.subsample(8);
            let maes = std::iter::once(&out.initial)
                .chain(out.depths.iter())
                .map(|d| metrics_2d(d, &gt8).map(|m| m.mae))
                .collect::<Result<Vec<_>, _>>()
                .unwrap_or_default();
            (m, maes)
        }
        None => (None, Vec::new()),
    };
    Ok(FrameResult {
        index: target,
        source,
        sparse_points: moved.map.len(),
        prediction,
        metrics,
        iteration_mae,
        times: StageTimes { encode, volume: out.volume_time, integrate: out.update_time, decode: decode_time },
    })
}

/// Runs the full pipeline on every frame that has an earlier depth frame.
pub fn run_pipeline(seq: &Sequence, cfg: &RunConfig) -> Result<RunReport, HarnessError> {
    let pipe = Pipeline::from_config(cfg)?;
    run_with(seq, cfg, &pipe)
}

/// [`run_pipeline`] with prebuilt components.
pub fn run_with(seq: &Sequence, cfg: &RunConfig, pipe: &Pipeline) -> Result<RunReport, HarnessError> {
    let prepared = prepare_sequence(seq, cfg)?;
    let mut jobs = Vec::new();
    let mut skipped = Vec::new();
    for f in &prepared.frames {
        match prepared.source_for(f.index) {
            Some(s) => jobs.push((f.index, s)),
            None => {
                log::warn!("frame {} has no earlier depth frame, skipped", f.index);
                skipped.push(f.index);
            }
        }
    }
    let frames = jobs
        .par_iter()
        .map(|&(t, s)| process_frame(&prepared, t, s, cfg.iterations, pipe))
        .collect::<Result<Vec<_>, _>>()?;
    let evaluated: Vec<Metrics2D> = frames.iter().filter_map(|f| f.metrics).collect();
    let aggregate = Metrics2D::mean(&evaluated);
    let timed = if frames.len() > 1 { &frames[1..] } else { &frames[..] };
    let mut timings = StageTimes::default();
    for f in timed {
        timings.encode += f.times.encode;
        timings.volume += f.times.volume;
        timings.integrate += f.times.integrate;
        timings.decode += f.times.decode;
    }
    if !timed.is_empty() {
        let n = timed.len() as u32;
        timings = StageTimes { encode: timings.encode / n, volume: timings.volume / n, integrate: timings.integrate / n, decode: timings.decode / n };
    }
    let mut report = RunReport { config: cfg.clone(), frames, skipped, aggregate, metrics_3d: None, mesh: None, timings };
    if cfg.mesh.enabled {
        let mesh = build_mesh(seq, &report, &cfg.mesh)?;
        report.metrics_3d = mesh.metrics;
        report.mesh = Some(mesh.mesh);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Tau,
    NPoints,
    Lambda,
    Iterations,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Tau => "tau",
            SweepAxis::NPoints => "n_points",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Iterations => "iterations",
        }
    }

    pub fn apply(self, cfg: &RunConfig, value: f64) -> Result<RunConfig, HarnessError> {
        let mut c = cfg.clone();
        let count = |v: f64| {
            if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
                Ok(v as usize)
            } else {
                Err(HarnessError::InvalidConfig(format!("{} needs a non-negative integer, got {v}", self.name())))
            }
        };
        match self {
            SweepAxis::Tau => c.tau = value,
            SweepAxis::NPoints => c.n_points = count(value)?,
            SweepAxis::Lambda => c.lambda = value,
            SweepAxis::Iterations => c.iterations = count(value)?,
        }
        c.validate()?;
        Ok(c)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tau" => Ok(SweepAxis::Tau),
            "n_points" => Ok(SweepAxis::NPoints),
            "lambda" => Ok(SweepAxis::Lambda),
            "iterations" => Ok(SweepAxis::Iterations),
            _ => Err(format!("unknown sweep axis {s}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub result: Result<(Metrics2D, StageTimes), String>,
}

/// One run per value with everything else fixed. Failing values are
/// recorded in their row and the sweep continues.
pub fn sweep(seq: &Sequence, axis: SweepAxis, values: &[f64], cfg: &RunConfig) -> Result<Vec<SweepRow>, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::InvalidConfig("sweep needs at least one value".into()));
    }
    let pipe = Pipeline::from_config(cfg)?;
    let mut base = cfg.clone();
    base.mesh.enabled = false;
    Ok(values
        .iter()
        .map(|&value| {
            let result = axis
                .apply(&base, value)
                .and_then(|c| run_with(seq, &c, &pipe))
                .and_then(|r| r.aggregate.map(|a| (a, r.timings)).ok_or_else(|| HarnessError::Numeric("no evaluated frames".into())))
                .map_err(|e| e.to_string());
            SweepRow { value, result }
        })
        .collect())
}
