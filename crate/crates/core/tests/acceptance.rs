//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use dod_core::decoder::{convex_upsample, decode, Decoder, UpsampleMask, MASK_CHANNELS};
use dod_core::encoding::{
    build_correlation_volume, correlation_score, extract_features, extract_monocular, EncoderHandle, FeatureGrid,
    HypothesisSet, D_MIN, PATCH,
};
use dod_core::eval::{brute_force_nn, extract_mesh, metrics_3d, KdTree, Point3, TsdfVolume};
use dod_core::geometry::{
    project_point, reproject_sparse_depth, CameraIntrinsics, DepthMap, PixelCoord, RigidPose, SparseDepthMap,
    SparseSample,
};
use dod_core::harness::{
    load_sequence, prepare_sequence, process_frame, run_pipeline, save_sequence, write_report, MeshConfig, Pipeline,
    RunConfig, RunReport,
};
use dod_core::integrator::{depth_delta, UpdateOperator};
use dod_core::model::{DodModel, ModelConfig};
use dod_core::scene::{
    render_depth, sample_sparse, synthetic_suite, trace_pixel, Primitive, SceneSpec, SuiteScene, Texture,
};
use dod_core::sequence::Sequence;
use dod_core::training::{
    module_gradient_check, sequence_loss, toy_dataset, train_toy, CheckedModule, LossConfig, TrainConfig,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_pose(rng: &mut ChaCha8Rng, t: f64, r: f64) -> RigidPose {
    let tr = Vector3::new(rng.random_range(-t..t), rng.random_range(-t..t), rng.random_range(-t..t));
    RigidPose::from_euler_xyz(tr, [rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r)])
}

fn suite_sequences(seed: u64) -> Vec<(String, Sequence)> {
    synthetic_suite()
        .into_iter()
        .map(|s: SuiteScene| {
            let seq = s.generate(1.0, usize::MAX, seed).expect("suite scene generates");
            (s.name, seq)
        })
        .collect()
}

fn descriptor_grid(seq: &Sequence, i: usize) -> FeatureGrid {
    extract_features(&seq.frames[i].color, &EncoderHandle::Descriptor).expect("descriptor")
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let k = CameraIntrinsics::new(120.0, 110.0, 63.5, 47.5, 128, 96).unwrap();
    let mut worst_rt: f64 = 0.0;
    for _ in 0..2000 {
        let pose = random_pose(&mut rng, 0.5, 0.3);
        let q = PixelCoord::new(rng.random_range(0.0..127.0), rng.random_range(0.0..95.0));
        let d = rng.random_range(0.5..8.0);
        let Ok((qs, ds)) = project_point(q, d, &k, &pose) else { continue };
        let (qb, db) = project_point(qs, ds, &k, &pose.inverse()).map_err(|e| e.to_string())?;
        let rel = [(qb.u - q.u) / q.u.abs().max(1.0), (qb.v - q.v) / q.v.abs().max(1.0), (db - d) / d];
        worst_rt = rel.iter().fold(worst_rt, |a, r| a.max(r.abs()));
    }
    ensure(worst_rt < 1e-7, || format!("round trip error {worst_rt:e}"))?;

    let suite = synthetic_suite();
    let mut worst_rep: f64 = 0.0;
    let mut checked = 0usize;
    for s in suite.iter().take(4) {
        let frames = s.trajectory.frames();
        let (src_pose, tgt_pose) = (frames[0].1, frames[4].1);
        let gt_src = render_depth(&s.scene, &src_pose, &s.intrinsics);
        let sparse = sample_sparse(&gt_src, 400, 3);
        let source_to_target = RigidPose::relative(&src_pose, &tgt_pose);
        let moved = reproject_sparse_depth(&sparse, &source_to_target, &s.intrinsics);
        for p in &moved.map.samples {
            let Some((d, _)) = trace_pixel(&s.scene, &tgt_pose, &s.intrinsics, p.coord) else { continue };
            if d < p.depth * (1.0 - 1e-4) {
                continue;
            }
            worst_rep = worst_rep.max((d - p.depth).abs() / d);
            checked += 1;
        }
    }
    ensure(checked > 500, || format!("only {checked} unoccluded samples"))?;
    ensure(worst_rep < 1e-6, || format!("reprojection error {worst_rep:e}"))?;

    let mut mismatches = 0;
    for trial in 0..50 {
        let (w, h) = (40 + trial % 7, 24 + trial % 5);
        let samples: Vec<SparseSample> = (0..300)
            .map(|_| SparseSample {
                coord: PixelCoord::new(rng.random_range(-0.5..w as f64 - 0.5), rng.random_range(-0.5..h as f64 - 0.5)),
                depth: rng.random_range(0.5..5.0),
            })
            .collect();
        let map = SparseDepthMap::new(w, h, samples.clone());
        let fast = map.rasterize(8);
        let (gw, gh) = (w.div_ceil(8), h.div_ceil(8));
        for cy in 0..gh {
            for cx in 0..gw {
                let mut best = 0.0_f64;
                for s in &samples {
                    let x = ((s.coord.u / 8.0).round().max(0.0) as usize).min(gw - 1);
                    let y = ((s.coord.v / 8.0).round().max(0.0) as usize).min(gh - 1);
                    if (x, y) == (cx, cy) && (best == 0.0 || s.depth < best) {
                        best = s.depth;
                    }
                }
                if fast.get(cx, cy) != best {
                    mismatches += 1;
                }
            }
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} z-buffer cells differ"))?;
    Ok(format!("round trip {worst_rt:.1e}, reprojection {worst_rep:.1e} over {checked} samples, z-buffer exact"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let s = &synthetic_suite()[0];
    let seq = s.generate(1.0, usize::MAX, 1).map_err(|e| e.to_string())?;
    let (t, src) = (3, 0);
    let ft = descriptor_grid(&seq, t);
    let fs = descriptor_grid(&seq, src);
    let k8 = seq.intrinsics.scaled(8);
    let rel = RigidPose::relative(&seq.frames[t].pose, &seq.frames[src].pose);
    let gt8 = seq.frames[t].gt_depth.as_ref().unwrap().subsample(8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let depth = DepthMap::from_values(
        gt8.width(),
        gt8.height(),
        gt8.values().iter().map(|d| (d + rng.random_range(-0.6..0.6)).max(0.01)).collect(),
    )
    .unwrap();
    let hyp = HypothesisSet::default();
    let vol = build_correlation_volume(&ft, &fs, &depth, &k8, &rel, &hyp).map_err(|e| e.to_string())?;
    let offsets = hyp.offsets();
    let mut checked = 0usize;
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            for (hi, off) in offsets.iter().enumerate() {
                let dh = (depth.get(x, y) + off).max(D_MIN);
                let proj = project_point(PixelCoord::new(x as f64, y as f64), dh, &k8, &rel).ok();
                for p in 0..PATCH {
                    let expected = proj
                        .and_then(|(q, _)| {
                            let (dx, dy) = ((p % 3) as f64 - 1.0, (p / 3) as f64 - 1.0);
                            let qs = PixelCoord::new(q.u + dx, q.v + dy);
                            correlation_score(&ft, &fs, PixelCoord::new(x as f64, y as f64), qs).ok()
                        })
                        .unwrap_or(0.0);
                    let got = vol.get(hi, p, x, y);
                    if got != expected {
                        return Err(format!("volume ({hi},{p},{x},{y}) = {got} but score = {expected}"));
                    }
                    checked += 1;
                }
            }
        }
    }

    for trial in 0..100 {
        let (w, h) = (5 + trial % 9, 4 + trial % 6);
        let n = w * h;
        let sparse: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.4) { rng.random_range(0.2..6.0) } else { 0.0 }).collect();
        let cur: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..6.0)).collect();
        let got = depth_delta(&DepthMap::from_values(w, h, sparse.clone()).unwrap(), &DepthMap::from_values(w, h, cur.clone()).unwrap())
            .map_err(|e| e.to_string())?;
        for i in 0..n {
            let expected = if sparse[i] > 0.0 { sparse[i] - cur[i] } else { 0.0 };
            if got[i] != expected {
                return Err(format!("depth_delta cell {i}: {} vs {expected}", got[i]));
            }
        }
    }
    Ok(format!("{checked} volume entries exact, depth_delta exact on 100 maps"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let hyp = HypothesisSet::default();
    let off = hyp.offsets();
    ensure(off.len() == 41, || format!("{} offsets", off.len()))?;
    ensure(off[hyp.center()] == 0.0, || "centre offset is not zero".into())?;
    for i in 0..off.len() {
        ensure((off[i] + off[off.len() - 1 - i]).abs() < 1e-12, || format!("offset {i} not symmetric"))?;
        if i > 0 {
            ensure((off[i] - off[i - 1] - 0.1).abs() < 1e-12, || format!("spacing at {i} is {}", off[i] - off[i - 1]))?;
        }
    }
    let s = &synthetic_suite()[2];
    let seq = s.generate(1.0, usize::MAX, 1).map_err(|e| e.to_string())?;
    let f = descriptor_grid(&seq, 2);
    let depth = seq.frames[2].gt_depth.as_ref().unwrap().subsample(8);
    let k8 = seq.intrinsics.scaled(8);
    let vol = build_correlation_volume(&f, &f, &depth, &k8, &RigidPose::identity(), &hyp).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            for p in 0..PATCH {
                let c = vol.get(0, p, x, y);
                for h in 1..hyp.count {
                    worst = worst.max((vol.get(h, p, x, y) - c).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-9, || format!("identity volume varies by {worst:e}"))?;
    Ok(format!("41 offsets, 0.1 m spacing, symmetric; identity spread {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, scale: f64) -> UpsampleMask {
    let logits: Vec<f64> = (0..MASK_CHANNELS * w * h).map(|_| rng.random_range(-scale..scale)).collect();
    UpsampleMask::from_logits(&logits, w, h)
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_sum: f64 = 0.0;
    for trial in 0..50 {
        let (w, h) = (3 + trial % 5, 2 + trial % 4);
        let mask = random_mask(&mut rng, w, h, 8.0);
        for y in 0..h {
            for x in 0..w {
                for a in 0..2 {
                    for b in 0..2 {
                        worst_sum = worst_sum.max((mask.weights(x, y, a, b).iter().sum::<f64>() - 1.0).abs());
                    }
                }
            }
        }
        let c = rng.random_range(0.5..5.0);
        let up = convex_upsample(&DepthMap::constant(w, h, c), &mask).map_err(|e| e.to_string())?;
        ensure(up.values().iter().all(|v| (v - c).abs() < 1e-12), || "constant map not preserved".into())?;
        let coarse = DepthMap::from_values(w, h, (0..w * h).map(|_| rng.random_range(0.5..5.0)).collect()).unwrap();
        let up = convex_upsample(&coarse, &mask).map_err(|e| e.to_string())?;
        let (lo, hi) = coarse.values().iter().fold((f64::MAX, f64::MIN), |(l, u), v| (l.min(*v), u.max(*v)));
        ensure(up.values().iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12), || "output leaves [min, max]".into())?;
        let mut onehot = [0.0; 9];
        onehot[4] = 1.0;
        let nn = convex_upsample(&coarse, &UpsampleMask::from_weights(w, h, vec![onehot; 4 * w * h])).map_err(|e| e.to_string())?;
        for fy in 0..2 * h {
            for fx in 0..2 * w {
                ensure(nn.get(fx, fy) == coarse.get(fx / 2, fy / 2), || format!("one-hot mismatch at ({fx},{fy})"))?;
            }
        }
    }
    ensure(worst_sum <= 1e-6, || format!("weight group sums off by {worst_sum:e}"))?;

    let s = &synthetic_suite()[5];
    let seq = s.generate(1.0, usize::MAX, 1).map_err(|e| e.to_string())?;
    let img = &seq.frames[0].color;
    let (w, h) = (img.width(), img.height());
    let depth8 = seq.frames[0].gt_depth.as_ref().unwrap().subsample(8);
    let model = DodModel::new(ModelConfig::toy(), 1);
    let handles = model.handles();
    let pairs = [
        (EncoderHandle::Descriptor, UpdateOperator::analytic(), Decoder::Uniform),
        (handles.mono.clone(), handles.operator.clone(), handles.decoder.clone()),
    ];
    for (mono, op, dec) in pairs {
        let pyr = extract_monocular(img, &mono).map_err(|e| e.to_string())?;
        let hidden = op.initial_hidden(pyr.level(8));
        let out = decode(&depth8, &hidden, &pyr, &dec).map_err(|e| e.to_string())?;
        ensure((out.width(), out.height()) == (w, h), || format!("decoded {}x{} for {w}x{h}", out.width(), out.height()))?;
    }
    Ok(format!("convexity, constants and one-hot exact; group sums within {worst_sum:.1e}; decode {w}x{h}"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = LossConfig::default();
    ensure(cfg.nu == 0.8, || "default nu is not 0.8".into())?;
    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let (w, h) = (4 + trial % 5, 3 + trial % 4);
        let n_preds = 1 + trial % 6;
        let gt: Vec<f64> = (0..w * h).map(|_| if rng.random_bool(0.7) { rng.random_range(0.5..5.0) } else { 0.0 }).collect();
        if !gt.iter().any(|v| *v > 0.0) {
            continue;
        }
        let preds: Vec<Vec<f64>> = (0..n_preds).map(|_| (0..w * h).map(|_| rng.random_range(0.1..6.0)).collect()).collect();
        let mut oracle = 0.0;
        for (i, p) in preds.iter().enumerate() {
            let (mut s, mut c) = (0.0, 0.0);
            for j in 0..w * h {
                if gt[j] > 0.0 {
                    s += (p[j] - gt[j]).abs();
                    c += 1.0;
                }
            }
            oracle += 0.8_f64.powi((n_preds - 1 - i) as i32) * s / c;
        }
        let maps: Vec<DepthMap> = preds.into_iter().map(|p| DepthMap::from_values(w, h, p).unwrap()).collect();
        let got = sequence_loss(&maps, &DepthMap::from_values(w, h, gt).unwrap(), &cfg).map_err(|e| e.to_string())?;
        worst = worst.max((got - oracle).abs());
    }
    ensure(worst <= 1e-12, || format!("loss differs from oracle by {worst:e}"))?;

    let suite = synthetic_suite();
    let data = toy_dataset(&suite[..3], 32, 32, 2, 100, 5);
    let mut model = DodModel::new(ModelConfig::toy(), 5);
    let tc = TrainConfig { steps: 12, iterations: 2, lr: 0.05, seed: 5, ..TrainConfig::default() };
    let report = train_toy(&mut model, &data, &tc).map_err(|e| e.to_string())?;
    let max_norm = report.grad_norms.iter().copied().fold(0.0, f64::max);
    ensure(max_norm <= 1.0 + 1e-6, || format!("clipped gradient norm {max_norm}"))?;
    Ok(format!("loss within {worst:.1e} of oracle; max clipped norm {max_norm:.6} over {} steps", tc.steps))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let suite = synthetic_suite();
    let sample = toy_dataset(&suite[..1], 32, 32, 2, 40, 6).swap_remove(1);
    let model = DodModel::new(ModelConfig::toy(), 6);
    let mut parts = Vec::new();
    let mut worst: f64 = 0.0;
    for m in CheckedModule::ALL {
        let err = module_gradient_check(&model, m, &sample.target_image, 32, 1e-5, 6).map_err(|e| e.to_string())?;
        parts.push(format!("{} {err:.1e}", m.prefix().trim_end_matches('.')));
        worst = worst.max(err);
    }
    ensure(worst <= 1e-4, || format!("max relative error {worst:e} ({})", parts.join(", ")))?;
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------- 7

fn run_suite(seqs: &[(String, Sequence)], cfg: &RunConfig) -> Result<Vec<RunReport>, String> {
    seqs.iter().map(|(name, s)| run_pipeline(s, cfg).map_err(|e| format!("{name}: {e}"))).collect()
}

fn mean_curve(reports: &[RunReport]) -> Vec<f64> {
    let curves: Vec<Vec<f64>> = reports.iter().map(|r| r.mean_iteration_mae()).collect();
    (0..curves[0].len()).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64).collect()
}

fn criterion_7() -> Outcome {
    let seqs = suite_sequences(7);
    let cfg = RunConfig { tau: 0.2, n_points: 500, iterations: 10, seed: 7, ..RunConfig::default() };
    let reports = run_suite(&seqs, &cfg)?;
    for ((name, _), r) in seqs.iter().zip(&reports) {
        let c = r.mean_iteration_mae();
        println!("    {name:12} 1/8 MAE {}", c.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" "));
    }
    let c = mean_curve(&reports);
    let fmt = c.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ");
    let increases: Vec<usize> = (1..c.len()).filter(|&i| c[i] > c[i - 1]).collect();
    let ratio = c[10] / c[0];
    let stable = (9..=10).all(|i| (c[i] - c[i - 1]).abs() < 0.05 * c[8]);
    let detail = format!("suite mean {fmt}; final/init {ratio:.3}");
    ensure(increases.is_empty(), || format!("MAE increases at iterations {increases:?}; {detail}"))?;
    ensure(ratio <= 0.2, || format!("final/init {ratio:.3} > 0.2; {detail}"))?;
    ensure(stable, || format!("iterations 8..10 change by 5% or more; {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn suite_mae(seqs: &[(String, Sequence)], cfg: &RunConfig) -> Result<f64, String> {
    let reports = run_suite(seqs, cfg)?;
    Ok(reports.iter().map(|r| r.aggregate.map_or(f64::NAN, |a| a.mae)).sum::<f64>() / reports.len() as f64)
}

fn check_trend(name: &str, values: &[f64], maes: &[f64], increasing: bool) -> Result<String, String> {
    let line = values.iter().zip(maes).map(|(v, m)| format!("{v}:{m:.4}")).collect::<Vec<_>>().join(" ");
    let bad: Vec<usize> =
        (1..maes.len()).filter(|&i| if increasing { maes[i] < maes[i - 1] } else { maes[i] > maes[i - 1] }).collect();
    ensure(bad.is_empty(), || format!("{name} trend broken at {bad:?} [{line}]"))?;
    Ok(format!("{name} [{line}]"))
}

fn criterion_8() -> Outcome {
    let seqs = suite_sequences(8);
    let base = RunConfig { tau: 0.2, n_points: 500, seed: 8, ..RunConfig::default() };
    let mut failures = Vec::new();
    let mut lines = Vec::new();
    let mut record = |r: Result<String, String>| match r {
        Ok(l) => lines.push(l),
        Err(e) => failures.push(e),
    };

    let taus = [0.1, 0.2, 0.25, 1.0 / 3.0, 0.5, 1.0];
    let maes = taus.iter().map(|&t| suite_mae(&seqs, &RunConfig { tau: t, ..base.clone() })).collect::<Result<Vec<_>, _>>()?;
    record(check_trend("tau", &taus, &maes, false));

    let points = [500.0, 200.0, 100.0, 50.0];
    let maes = points
        .iter()
        .map(|&n| suite_mae(&seqs, &RunConfig { n_points: n as usize, ..base.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    record(check_trend("n_points", &points, &maes, true));

    let lambdas = [0.0, 0.1, 0.2, 0.3];
    let maes =
        lambdas.iter().map(|&l| suite_mae(&seqs, &RunConfig { lambda: l, ..base.clone() })).collect::<Result<Vec<_>, _>>()?;
    record(check_trend("lambda", &lambdas, &maes, true));

    let (name, seq) = &seqs[0];
    let noisy0 = run_pipeline(seq, &base).map_err(|e| e.to_string())?;
    let clean = prepare_sequence(seq, &base).map_err(|e| e.to_string())?;
    let pipe = Pipeline::analytic();
    for f in &noisy0.frames {
        let r = process_frame(&clean, f.index, f.source, base.iterations, &pipe).map_err(|e| e.to_string())?;
        if r.prediction != f.prediction {
            failures.push(format!("lambda = 0 differs from the noise-free run on {name} frame {}", f.index));
            break;
        }
    }
    if failures.is_empty() {
        Ok(format!("{}; lambda 0 bit-exact", lines.join("; ")))
    } else if lines.is_empty() {
        Err(failures.join("; "))
    } else {
        Err(format!("{}; held: {}", failures.join("; "), lines.join("; ")))
    }
}

// ---------------------------------------------------------------- 9

fn percentile95(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[((v.len() as f64 * 0.95).ceil() as usize).saturating_sub(1)]
}

fn fuse_views(scene: &SceneSpec, views: &[RigidPose], k: &CameraIntrinsics, lo: Point3, hi: Point3) -> Result<Vec<Point3>, String> {
    let mut vol = TsdfVolume::with_default_truncation(lo, hi, 0.02);
    for pose in views {
        vol.integrate(&render_depth(scene, pose, k), pose, k);
    }
    Ok(extract_mesh(&vol).map_err(|e| e.to_string())?.vertices)
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut mismatches = 0;
    for trial in 0..30 {
        let n = 1 + trial * 16;
        let a: Vec<Point3> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
        let b: Vec<Point3> = (0..n.min(500)).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
        let brute = brute_force_nn(&a, &b).map_err(|e| e.to_string())?;
        let tree = KdTree::build(&b);
        for (q, d) in a.iter().zip(&brute) {
            if tree.nearest_distance(q) != Some(*d) {
                mismatches += 1;
            }
        }
    }
    ensure(mismatches == 0, || format!("{mismatches} k-d tree distances differ from brute force"))?;

    let cloud: Vec<Point3> = (0..400).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect();
    let m = metrics_3d(&cloud, &cloud, 0.05).map_err(|e| e.to_string())?;
    ensure(m.acc == 0.0 && m.comp == 0.0 && m.chamfer == 0.0, || format!("identical distances {m:?}"))?;
    ensure(m.prec == 1.0 && m.recall == 1.0 && m.fscore == 1.0, || format!("identical scores {m:?}"))?;

    let tex = vec![Texture { seed: 1, cell: 0.3, octaves: 2, base: [0.5; 3], contrast: 0.4 }];
    let k = CameraIntrinsics::new(90.0, 90.0, 47.5, 47.5, 96, 96).unwrap();
    let up = Vector3::new(0.0, -1.0, 0.0);
    let target = Vector3::new(0.0, 0.0, 2.0);
    let views: Vec<RigidPose> = (0..6)
        .map(|i| {
            let a = i as f64 / 6.0 * std::f64::consts::TAU;
            RigidPose::look_at(Vector3::new(0.6 * a.cos(), 0.4 * a.sin(), 0.0), target, up).unwrap()
        })
        .collect();

    let n = Vector3::new(0.2, -0.1, -1.0).normalize();
    let p0 = Vector3::new(0.0, 0.0, 2.0);
    let plane = SceneSpec { primitives: vec![Primitive::Plane { point: p0.into(), normal: n.into(), texture: 0 }], textures: tex.clone() };
    let verts = fuse_views(&plane, &views, &k, [-1.0, -1.0, 1.4], [1.0, 1.0, 2.6])?;
    let plane_p95 = percentile95(verts.iter().map(|v| (Vector3::from(*v) - p0).dot(&n).abs()).collect());

    let c = Vector3::new(0.0, 0.0, 2.0);
    let sphere = SceneSpec { primitives: vec![Primitive::Sphere { center: c.into(), radius: 0.5, texture: 0 }], textures: tex };
    let verts = fuse_views(&sphere, &views, &k, [-0.7, -0.7, 1.3], [0.7, 0.7, 2.7])?;
    let sphere_p95 = percentile95(verts.iter().map(|v| ((Vector3::from(*v) - c).norm() - 0.5).abs()).collect());
    ensure(plane_p95 <= 0.02, || format!("plane p95 {plane_p95:.4} m"))?;
    ensure(sphere_p95 <= 0.02, || format!("sphere p95 {sphere_p95:.4} m"))?;
    Ok(format!("k-d tree exact; identical clouds perfect; p95 plane {plane_p95:.4} m, sphere {sphere_p95:.4} m"))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let s = &synthetic_suite()[5];
    let seq = s.generate(1.0, 800, 10).map_err(|e| e.to_string())?;
    let seq_dir = dir.path().join("seq");
    save_sequence(&seq, &seq_dir).map_err(|e| e.to_string())?;
    let cfg = RunConfig { tau: 0.2, seed: 10, mesh: MeshConfig { enabled: true, density: 2.0e3, ..MeshConfig::default() }, ..RunConfig::default() };
    let mut outputs = Vec::new();
    for run in 0..2 {
        let loaded = load_sequence(&seq_dir).map_err(|e| e.to_string())?;
        let report = run_pipeline(&loaded, &cfg).map_err(|e| e.to_string())?;
        let out = dir.path().join(format!("run{run}"));
        write_report(&report, &out).map_err(|e| e.to_string())?;
        outputs.push(out);
    }
    let mut compared = Vec::new();
    for name in ["frames.csv", "summary.csv", "iterations.csv", "mesh.ply"] {
        let a = std::fs::read(outputs[0].join(name)).map_err(|e| format!("{name}: {e}"))?;
        let b = std::fs::read(outputs[1].join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure(a == b, || format!("{name} differs between runs"))?;
        compared.push(format!("{name} ({} B)", a.len()));
    }
    Ok(format!("byte-identical: {}", compared.join(", ")))
}

fn main() {
    type Criterion = (usize, fn() -> Outcome, Duration);
    let criteria: [Criterion; 10] = [
        (1, criterion_1, Duration::from_secs(10)),
        (2, criterion_2, Duration::from_secs(10)),
        (3, criterion_3, Duration::from_secs(60)),
        (4, criterion_4, Duration::from_secs(60)),
        (5, criterion_5, Duration::from_secs(120)),
        (6, criterion_6, Duration::from_secs(120)),
        (7, criterion_7, Duration::from_secs(120)),
        (8, criterion_8, Duration::from_secs(600)),
        (9, criterion_9, Duration::from_secs(120)),
        (10, criterion_10, Duration::from_secs(120)),
    ];
    let filter: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = Vec::new();
    for (id, f, limit) in criteria {
        if filter.is_some_and(|x| x != id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = t.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > limit => Err(format!("{msg}; took {elapsed:.1?}, limit {limit:?}")),
            o => o,
        };
        match &outcome {
            Ok(msg) => println!("criterion {id:2}: PASS [{elapsed:.1?}] {msg}"),
            Err(msg) => {
                println!("criterion {id:2}: FAIL [{elapsed:.1?}] {msg}");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}
