//! Sequence loss, augmentation, finite-difference gradient checks and a
//! small training loop.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::HypothesisSet;
use crate::geometry::{reproject_sparse_depth, CameraIntrinsics, DepthMap, RigidPose, SparseDepthMap};
use crate::integrator::FALLBACK_DEPTH;
use crate::model::{DodModel, TrainInput};
use crate::nn::{Gradients, Graph, NodeId, ParamId, ParamStore, Tensor};
use crate::raster::ColorImage;
use crate::scene::{frame_seed, render_color, render_depth, sample_sparse, SuiteScene};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainingError {
    #[error("ground truth has no valid pixels")]
    EmptyValidSet,
    #[error("prediction shape does not match ground truth")]
    ShapeMismatch,
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("loss became non-finite at step {0}")]
    DivergedLoss(usize),
    #[error("invalid training input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub nu: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { nu: 0.8 }
    }
}

/// Mean absolute error over pixels where `gt` is valid.
pub fn masked_l1(pred: &DepthMap, gt: &DepthMap) -> Result<f64, TrainingError> {
    if !pred.same_shape(gt) {
        return Err(TrainingError::ShapeMismatch);
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&p, &t) in pred.values().iter().zip(gt.values()) {
        if t > 0.0 {
            sum += (p - t).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainingError::EmptyValidSet);
    }
    Ok(sum / n as f64)
}

/// `Σ_i ν^(N-i) · mean_valid |pred_i - gt|` over the `N` predictions.
pub fn sequence_loss(preds: &[DepthMap], gt: &DepthMap, cfg: &LossConfig) -> Result<f64, TrainingError> {
    if gt.valid_count() == 0 {
        return Err(TrainingError::EmptyValidSet);
    }
    let n = preds.len();
    let mut total = 0.0;
    for (i, p) in preds.iter().enumerate() {
        total += cfg.nu.powi((n - 1 - i) as i32) * masked_l1(p, gt)?;
    }
    Ok(total)
}

/// [`sequence_loss`] on graph nodes.
pub fn sequence_loss_graph(g: &mut Graph, preds: &[NodeId], gt: &DepthMap, cfg: &LossConfig) -> Result<NodeId, TrainingError> {
    let target = Arc::new(gt.values().to_vec());
    let n = preds.len();
    let mut terms = Vec::with_capacity(n);
    for (i, &p) in preds.iter().enumerate() {
        let l = g.masked_l1(p, target.clone()).ok_or(TrainingError::EmptyValidSet)?;
        terms.push((l, cfg.nu.powi((n - 1 - i) as i32)));
    }
    if terms.is_empty() {
        return Err(TrainingError::InvalidInput("no predictions".into()));
    }
    Ok(g.weighted_sum(&terms))
}

/// A previous frame available as a source.
#[derive(Debug, Clone, PartialEq)]
pub struct BufferFrame {
    pub image: ColorImage,
    pub sparse: SparseDepthMap,
    /// Camera-to-world.
    pub pose: RigidPose,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub intrinsics: CameraIntrinsics,
    pub target_image: ColorImage,
    pub target_gt: DepthMap,
    pub target_pose: RigidPose,
    pub buffer: Vec<BufferFrame>,
    pub source: usize,
}

impl TrainSample {
    /// Reprojects the selected source's sparse depth into the target and
    /// rasterises it at 1/8.
    pub fn to_input(&self, hypotheses: HypothesisSet) -> Result<TrainInput, TrainingError> {
        let src = self.buffer.get(self.source).ok_or_else(|| TrainingError::InvalidInput("source index".into()))?;
        let target_to_source = RigidPose::relative(&self.target_pose, &src.pose);
        let moved = reproject_sparse_depth(&src.sparse, &target_to_source.inverse(), &self.intrinsics);
        Ok(TrainInput {
            target: self.target_image.clone(),
            source: src.image.clone(),
            sparse8: moved.map.rasterize(8),
            k8: self.intrinsics.scaled(8),
            target_to_source,
            hypotheses,
            fallback: FALLBACK_DEPTH,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Brightness and contrast factors are drawn from `[1-j, 1+j]`.
    pub jitter: f64,
    pub flip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { jitter: 0.2, flip_probability: 0.5 }
    }
}

fn mirror(pose: &RigidPose) -> RigidPose {
    let mut r = *pose.rotation();
    let mut t = *pose.translation();
    // diag(-1,1,1) R diag(-1,1,1) flips the signs of the off-diagonal x terms
    for i in 1..3 {
        r[(0, i)] = -r[(0, i)];
        r[(i, 0)] = -r[(i, 0)];
    }
    t.x = -t.x;
    RigidPose::new(r, t).expect("mirror conjugation keeps the rotation proper")
}

/// Mirrors every view horizontally and adjusts intrinsics and poses so the
/// projection geometry stays consistent.
pub fn flip_sample(sample: &TrainSample) -> TrainSample {
    let mut k = sample.intrinsics;
    k.cx = k.width as f64 - 1.0 - k.cx;
    TrainSample {
        intrinsics: k,
        target_image: sample.target_image.flip_horizontal(),
        target_gt: sample.target_gt.flip_horizontal(),
        target_pose: mirror(&sample.target_pose),
        buffer: sample
            .buffer
            .iter()
            .map(|b| BufferFrame { image: b.image.flip_horizontal(), sparse: b.sparse.flip_horizontal(), pose: mirror(&b.pose) })
            .collect(),
        source: sample.source,
    }
}

/// Brightness/contrast jitter (same factors for every view) and a random
/// horizontal flip.
pub fn augment(sample: &TrainSample, seed: u64, cfg: &AugmentConfig) -> TrainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let brightness = 1.0 + rng.random_range(-1.0..=1.0) * cfg.jitter;
    let contrast = 1.0 + rng.random_range(-1.0..=1.0) * cfg.jitter;
    let flip = rng.random_bool(cfg.flip_probability.clamp(0.0, 1.0));
    let mut out = if flip { flip_sample(sample) } else { sample.clone() };
    if cfg.jitter > 0.0 {
        let jit = |img: &ColorImage| img.map(|p| p.map(|c| (brightness * ((c - 0.5) * contrast + 0.5)).clamp(0.0, 1.0)));
        out.target_image = jit(&out.target_image);
        for b in &mut out.buffer {
            b.image = jit(&b.image);
        }
    }
    out
}

/// Largest relative disagreement between analytic and central-difference
/// gradients over the selected scalar parameters.
pub fn gradient_check(
    params: &ParamStore,
    selection: &[(ParamId, usize)],
    eps: f64,
    loss: impl Fn(&ParamStore) -> f64,
    grad: impl Fn(&ParamStore) -> Gradients,
) -> Result<f64, TrainingError> {
    if !(eps > 0.0) {
        return Err(TrainingError::InvalidStep(eps));
    }
    let analytic = grad(params);
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for &(id, i) in selection {
        let a = analytic.get(id)[i];
        if !a.is_finite() {
            return Err(TrainingError::NonFiniteGradient(format!("{}[{i}]", params.name(id))));
        }
        let orig = probe.get(id).data()[i];
        probe.get_mut(id).data_mut()[i] = orig + eps;
        let up = loss(&probe);
        probe.get_mut(id).data_mut()[i] = orig - eps;
        let down = loss(&probe);
        probe.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        if !numeric.is_finite() {
            return Err(TrainingError::NonFiniteGradient(format!("{}[{i}] (numeric)", params.name(id))));
        }
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1e-8));
    }
    Ok(worst)
}

/// Parameter group of [`module_gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedModule {
    Geometry,
    Mono,
    Operator,
}

impl CheckedModule {
    pub const ALL: [CheckedModule; 3] = [CheckedModule::Geometry, CheckedModule::Mono, CheckedModule::Operator];

    pub fn prefix(self) -> &'static str {
        match self {
            CheckedModule::Geometry => "geometry.",
            CheckedModule::Mono => "mono.",
            CheckedModule::Operator => "operator.",
        }
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Gradient check of one module against a fixed random linear projection of
/// its outputs. Encoders see `image`; the operator runs two recurrent steps
/// on random inputs at the 1/8 size of `image` with a third of the cells
/// carrying sparse depth.
pub fn module_gradient_check(
    model: &DodModel,
    module: CheckedModule,
    image: &ColorImage,
    count: usize,
    eps: f64,
    seed: u64,
) -> Result<f64, TrainingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w8, h8) = (image.width() / 8, image.height() / 8);
    if w8 == 0 || h8 == 0 {
        return Err(TrainingError::InvalidInput("image smaller than one 1/8 cell".into()));
    }
    let n8 = w8 * h8;
    let img = image.to_tensor();
    let hyp = HypothesisSet::default();
    let mono_c = model.config.mono[2];
    let corr = Tensor::new(vec![hyp.channels(), h8, w8], normal_vec(&mut rng, hyp.channels() * n8, 0.5));
    let depth: Vec<f64> = (0..n8).map(|_| rng.random_range(1.0..3.0)).collect();
    let mono = Tensor::new(vec![mono_c, h8, w8], normal_vec(&mut rng, mono_c * n8, 0.5));
    let sparse: Vec<f64> = (0..n8).map(|i| if i % 3 == 0 { rng.random_range(1.0..3.0) } else { 0.0 }).collect();
    let sparse = Arc::new(sparse);
    let probe = |store: &ParamStore, rng: &mut ChaCha8Rng| -> (f64, Gradients) {
        let mut g = Graph::new(store);
        let mut outputs = Vec::new();
        match module {
            CheckedModule::Geometry | CheckedModule::Mono => {
                let net = if module == CheckedModule::Geometry { &model.geometry } else { &model.mono };
                let x = g.input(img.clone());
                outputs.extend(net.forward(&mut g, x));
            }
            CheckedModule::Operator => {
                let op = &model.operator;
                let mono = g.input(mono.clone());
                let corr = g.input(corr.clone());
                let mut d = g.input(Tensor::new(vec![1, h8, w8], depth.clone()));
                let mut h = op.init_hidden_graph(&mut g, mono);
                for _ in 0..2 {
                    let st = op.step_graph(&mut g, h, corr, d, mono, sparse.clone());
                    outputs.push(st.delta_c);
                    (h, d) = (st.hidden, st.depth);
                }
                outputs.extend([h, d]);
            }
        }
        let terms: Vec<(NodeId, f64)> = outputs
            .iter()
            .map(|&o| {
                let coeffs = normal_vec(rng, g.value(o).len(), 1.0);
                (g.dot_const(o, Arc::new(coeffs)), 1.0)
            })
            .collect();
        let loss = g.weighted_sum(&terms);
        (g.value(loss).data()[0], g.backward(loss))
    };
    let coeff_seed: u64 = rng.random();
    let fixed = |store: &ParamStore| probe(store, &mut ChaCha8Rng::seed_from_u64(coeff_seed));
    let sel = select_params(&model.params, module.prefix(), count, seed);
    gradient_check(&model.params, &sel, eps, |p| fixed(p).0, |p| fixed(p).1)
}

/// Gradient check of the full model on one sample for every parameter
/// group in `prefixes`. Uses a single refinement step so that the
/// correlation sample locations depend only on the initialisation.
pub fn model_gradient_check(
    model: &DodModel,
    sample: &TrainSample,
    prefixes: &[&str],
    count: usize,
    eps: f64,
    seed: u64,
) -> Result<Vec<(String, f64)>, TrainingError> {
    let cfg = LossConfig::default();
    let loss = |p: &ParamStore| {
        let mut m = model.clone();
        m.params = p.clone();
        loss_and_gradients(&m, sample, 1, &cfg).map_or(f64::NAN, |(l, _)| l)
    };
    let grad = |p: &ParamStore| {
        let mut m = model.clone();
        m.params = p.clone();
        loss_and_gradients(&m, sample, 1, &cfg).map_or_else(|_| Gradients::zeros_like(p), |(_, g)| g)
    };
    loss_and_gradients(model, sample, 1, &cfg)?;
    prefixes
        .iter()
        .map(|prefix| {
            let sel = select_params(&model.params, prefix, count, seed);
            if sel.is_empty() {
                return Err(TrainingError::InvalidInput(format!("no parameters match {prefix}")));
            }
            Ok((prefix.to_string(), gradient_check(&model.params, &sel, eps, loss, grad)?))
        })
        .collect()
}

/// `count` random scalar entries from the parameters whose names start with
/// `prefix`.
pub fn select_params(params: &ParamStore, prefix: &str, count: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = params.ids().filter(|&id| params.name(id).starts_with(prefix)).collect();
    let total: usize = ids.iter().map(|&id| params.get(id).len()).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, total, count.min(total)).into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|mut flat| {
            for &id in &ids {
                let n = params.get(id).len();
                if flat < n {
                    return (id, flat);
                }
                flat -= n;
            }
            unreachable!("index within total")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.01,
            momentum: 0.9,
            iterations: 4,
            seed: 0,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    /// Global gradient norm after clipping, per step.
    pub grad_norms: Vec<f64>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,grad_norm\n");
        for (i, (l, g)) in self.losses.iter().zip(&self.grad_norms).enumerate() {
            s.push_str(&format!("{i},{l},{g}\n"));
        }
        s
    }
}

/// Loss and gradients of one sample.
pub fn loss_and_gradients(
    model: &DodModel,
    sample: &TrainSample,
    iterations: usize,
    cfg: &LossConfig,
) -> Result<(f64, Gradients), TrainingError> {
    let input = sample.to_input(HypothesisSet::default())?;
    let mut g = Graph::new(&model.params);
    let fwd = model.forward(&mut g, &input, iterations);
    let loss = sequence_loss_graph(&mut g, &fwd.preds, &sample.target_gt, cfg)?;
    let value = g.value(loss).data()[0];
    Ok((value, g.backward(loss)))
}

/// SGD with momentum and global-norm clipping. Each step draws a sample,
/// a source from its buffer, and an augmentation.
pub fn train_toy(model: &mut DodModel, dataset: &[TrainSample], cfg: &TrainConfig) -> Result<TrainReport, TrainingError> {
    if dataset.is_empty() || cfg.steps == 0 {
        return Err(TrainingError::InvalidInput("need at least one sample and one step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = Gradients::zeros_like(&model.params);
    let mut report = TrainReport { losses: Vec::with_capacity(cfg.steps), grad_norms: Vec::with_capacity(cfg.steps) };
    for step in 0..cfg.steps {
        let mut sample = dataset[rng.random_range(0..dataset.len())].clone();
        if sample.buffer.is_empty() {
            return Err(TrainingError::InvalidInput("empty buffer".into()));
        }
        sample.source = rng.random_range(0..sample.buffer.len());
        let aug_seed: u64 = rng.random();
        let sample = augment(&sample, aug_seed, &cfg.augment);
        let (loss, mut grads) = loss_and_gradients(model, &sample, cfg.iterations, &cfg.loss)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(TrainingError::DivergedLoss(step));
        }
        let norm = grads.global_norm();
        if norm > cfg.clip_norm {
            grads.scale(cfg.clip_norm / norm);
        }
        let clipped = grads.global_norm();
        log::debug!("step {step}: loss {loss:.6}, clipped gradient norm {clipped:.6}");
        for id in model.params.ids().collect::<Vec<_>>() {
            let v = velocity.get_mut(id);
            for (vi, gi) in v.iter_mut().zip(grads.get(id)) {
                *vi = cfg.momentum * *vi + gi;
            }
            let v = velocity.get(id);
            for (p, vi) in model.params.get_mut(id).data_mut().iter_mut().zip(v) {
                *p -= cfg.lr * vi;
            }
        }
        report.losses.push(loss);
        report.grad_norms.push(clipped);
    }
    Ok(report)
}

/// Training samples rendered from the suite scenes at a reduced
/// resolution. Every frame carries sparse depth; each target's buffer holds
/// up to `buffer` preceding frames.
pub fn toy_dataset(scenes: &[SuiteScene], width: usize, height: usize, buffer: usize, n_points: usize, seed: u64) -> Vec<TrainSample> {
    let mut out = Vec::new();
    for (si, s) in scenes.iter().enumerate() {
        let sx = width as f64 / s.intrinsics.width as f64;
        let sy = height as f64 / s.intrinsics.height as f64;
        let k = CameraIntrinsics {
            fx: s.intrinsics.fx * sx,
            fy: s.intrinsics.fy * sy,
            cx: (s.intrinsics.cx + 0.5) * sx - 0.5,
            cy: (s.intrinsics.cy + 0.5) * sy - 0.5,
            width,
            height,
        };
        let frames: Vec<(ColorImage, DepthMap, RigidPose)> = s
            .trajectory
            .frames()
            .iter()
            .map(|(_, pose)| (render_color(&s.scene, pose, &k).quantized(), render_depth(&s.scene, pose, &k), *pose))
            .collect();
        for t in 1..frames.len() {
            let lo = t.saturating_sub(buffer);
            let buf = (lo..t)
                .map(|i| BufferFrame {
                    image: frames[i].0.clone(),
                    sparse: sample_sparse(&frames[i].1, n_points, frame_seed(seed, si as u64, i)),
                    pose: frames[i].2,
                })
                .collect();
            out.push(TrainSample {
                intrinsics: k,
                target_image: frames[t].0.clone(),
                target_gt: frames[t].1.clone(),
                target_pose: frames[t].2,
                buffer: buf,
                source: 0,
            });
        }
    }
    out
}
