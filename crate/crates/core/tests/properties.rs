use dod_core::decoder::{convex_upsample, UpsampleMask, MASK_CHANNELS};
use dod_core::encoding::{build_correlation_volume, CorrelationPlan, CorrelationVolume, FeatureGrid, HypothesisSet, D_MIN, PATCH};
use dod_core::eval::{brute_force_nn, extract_mesh, metrics_2d, metrics_3d, ply, KdTree, Mesh, Point3, TsdfVolume};
use dod_core::geometry::{project_point, CameraIntrinsics, DepthMap, PixelCoord, RigidPose, SparseDepthMap, SparseSample};
use dod_core::integrator::{depth_delta, step, IntegratorState, UpdateOperator};
use dod_core::nn::Tensor;
use dod_core::scene::{render_depth, Primitive, SceneSpec, Texture};
use dod_core::training::{masked_l1, sequence_loss, LossConfig};
use nalgebra::Vector3;
use proptest::prelude::*;

fn cam(w: usize, h: usize) -> CameraIntrinsics {
    CameraIntrinsics::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap()
}

fn small_pose() -> impl Strategy<Value = RigidPose> {
    (prop::array::uniform3(-0.3..0.3f64), prop::array::uniform3(-0.15..0.15f64))
        .prop_map(|(t, a)| RigidPose::from_euler_xyz(Vector3::from(t), a))
}

fn depth_map(w: usize, h: usize) -> impl Strategy<Value = DepthMap> {
    prop::collection::vec(0.5..6.0f64, w * h).prop_map(move |v| DepthMap::from_values(w, h, v).unwrap())
}

fn sparse_grid(w: usize, h: usize) -> impl Strategy<Value = DepthMap> {
    prop::collection::vec(prop_oneof![Just(0.0), 0.01..6.0f64], w * h).prop_map(move |v| DepthMap::from_values(w, h, v).unwrap())
}

fn features(c: usize, w: usize, h: usize) -> impl Strategy<Value = FeatureGrid> {
    prop::collection::vec(-1.0..1.0f64, c * w * h).prop_map(move |v| FeatureGrid::from_tensor(Tensor::new(vec![c, h, w], v)))
}

fn points(n: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Point3>> {
    prop::collection::vec(prop::array::uniform3(-2.0..2.0f64), n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn projection_round_trips(pose in small_pose(), u in 0.0..63.0f64, v in 0.0..47.0f64, d in 0.5..8.0f64) {
        let k = cam(64, 48);
        let (qs, ds) = project_point(PixelCoord::new(u, v), d, &k, &pose).unwrap();
        let expect = pose.transform_point(&Vector3::new((u - k.cx) / k.fx * d, (v - k.cy) / k.fy * d, d));
        prop_assert!((ds - expect.z).abs() <= 1e-12 * ds.abs().max(1.0));
        let (back, db) = project_point(qs, ds, &k, &pose.inverse()).unwrap();
        prop_assert!((back.u - u).abs() < 1e-8 && (back.v - v).abs() < 1e-8);
        prop_assert!((db - d).abs() < 1e-9);
    }

    #[test]
    fn rasterize_keeps_cell_minimum(
        raw in prop::collection::vec((-0.5..63.4f64, -0.5..47.4f64, 0.1..9.0f64), 0..200),
    ) {
        let samples: Vec<SparseSample> = raw.iter().map(|&(u, v, d)| SparseSample { coord: PixelCoord::new(u, v), depth: d }).collect();
        let grid = SparseDepthMap::new(64, 48, samples.clone()).rasterize(8);
        prop_assert_eq!((grid.width(), grid.height()), (8, 6));
        let mut expect = vec![f64::INFINITY; 48];
        for s in &samples {
            let x = ((s.coord.u / 8.0).round().max(0.0) as usize).min(7);
            let y = ((s.coord.v / 8.0).round().max(0.0) as usize).min(5);
            expect[y * 8 + x] = expect[y * 8 + x].min(s.depth);
        }
        for (g, e) in grid.values().iter().zip(&expect) {
            prop_assert_eq!(*g, if e.is_finite() { *e } else { 0.0 });
        }
    }

    #[test]
    fn hypotheses_below_floor_share_sample_locations(pose in small_pose(), d in 0.05..0.15f64) {
        let k = cam(16, 12);
        let depth = DepthMap::constant(16, 12, d);
        let hyp = HypothesisSet::default();
        let plan = CorrelationPlan::new(&depth, &k, &pose, &hyp);
        let offsets = hyp.offsets();
        let clamped: Vec<usize> = (0..hyp.count).filter(|&i| d + offsets[i] <= D_MIN).collect();
        prop_assert!(clamped.len() >= 19);
        for &i in &clamped {
            for p in 0..PATCH {
                prop_assert_eq!(plan.taps(i * PATCH + p, 5, 4), plan.taps(clamped[0] * PATCH + p, 5, 4));
            }
        }
    }

    #[test]
    fn identity_pose_volume_is_constant_across_hypotheses(
        ft in features(4, 6, 5), fs in features(4, 6, 5), depth in depth_map(6, 5),
    ) {
        let hyp = HypothesisSet::default();
        let vol = build_correlation_volume(&ft, &fs, &depth, &cam(6, 5), &RigidPose::identity(), &hyp).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                for p in 0..PATCH {
                    let first = vol.get(0, p, x, y);
                    for h in 1..hyp.count {
                        prop_assert!((vol.get(h, p, x, y) - first).abs() <= 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn depth_delta_vanishes_off_samples(sparse in sparse_grid(5, 4), cur in depth_map(5, 4)) {
        let delta = depth_delta(&sparse, &cur).unwrap();
        for ((dd, s), c) in delta.iter().zip(sparse.values()).zip(cur.values()) {
            prop_assert_eq!(*dd, if *s > 0.0 { s - c } else { 0.0 });
        }
    }

    #[test]
    fn analytic_step_anchors_samples_and_stays_positive(
        sparse in sparse_grid(6, 5), cur in depth_map(6, 5),
        scores in prop::collection::vec(-1.0..1.0f64, 41 * PATCH * 30),
    ) {
        let hyp = HypothesisSet::default();
        let vol = CorrelationVolume::from_tensor(hyp.count, Tensor::new(vec![hyp.channels(), 5, 6], scores));
        let mono = FeatureGrid::zeros(2, 6, 5);
        let state = IntegratorState { hidden: FeatureGrid::zeros(1, 6, 5), depth: cur, iteration: 0 };
        let (next, deltas) = step(&state, &vol, &mono, &sparse, &UpdateOperator::analytic(), &hyp).unwrap();
        prop_assert_eq!(next.iteration, 1);
        for (i, (&n, &s)) in next.depth.values().iter().zip(sparse.values()).enumerate() {
            prop_assert!(n >= D_MIN);
            if s > 0.0 {
                prop_assert_eq!(n, s.max(D_MIN));
            } else {
                prop_assert!(deltas.delta_f[i].abs() <= 0.5 * 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn flat_volume_leaves_unanchored_cells_unchanged(sparse in sparse_grid(6, 5), cur in depth_map(6, 5), c in -1.0..1.0f64) {
        let hyp = HypothesisSet::default();
        let vol = CorrelationVolume::from_tensor(hyp.count, Tensor::new(vec![hyp.channels(), 5, 6], vec![c; hyp.channels() * 30]));
        let state = IntegratorState { hidden: FeatureGrid::zeros(1, 6, 5), depth: cur.clone(), iteration: 0 };
        let (next, _) = step(&state, &vol, &FeatureGrid::zeros(2, 6, 5), &sparse, &UpdateOperator::analytic(), &hyp).unwrap();
        for ((n, s), c) in next.depth.values().iter().zip(sparse.values()).zip(cur.values()) {
            if *s <= 0.0 {
                prop_assert_eq!(n, c);
            }
        }
    }

    #[test]
    fn convex_upsampling_stays_inside_neighbourhood(
        coarse in depth_map(5, 4),
        logits in prop::collection::vec(-4.0..4.0f64, MASK_CHANNELS * 20),
    ) {
        let mask = UpsampleMask::from_logits(&logits, 5, 4);
        for y in 0..4 {
            for x in 0..5 {
                for a in 0..2 {
                    for b in 0..2 {
                        let s: f64 = mask.weights(x, y, a, b).iter().sum();
                        prop_assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
        let fine = convex_upsample(&coarse, &mask).unwrap();
        for y in 0..8usize {
            for x in 0..10usize {
                let (cx, cy) = (x / 2, y / 2);
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for ny in cy.saturating_sub(1)..=(cy + 1).min(3) {
                    for nx in cx.saturating_sub(1)..=(cx + 1).min(4) {
                        lo = lo.min(coarse.get(nx, ny));
                        hi = hi.max(coarse.get(nx, ny));
                    }
                }
                let f = fine.get(x, y);
                prop_assert!(f >= lo - 1e-12 && f <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn sequence_loss_is_weighted_sum_of_l1(
        gt in sparse_grid(4, 3).prop_filter("needs a valid pixel", |g| g.valid_count() > 0),
        preds in prop::collection::vec(depth_map(4, 3), 1..5),
        nu in 0.1..1.0f64,
    ) {
        let cfg = LossConfig { nu };
        let loss = sequence_loss(&preds, &gt, &cfg).unwrap();
        let n = preds.len();
        let expect: f64 = preds.iter().enumerate().map(|(i, p)| nu.powi((n - 1 - i) as i32) * masked_l1(p, &gt).unwrap()).sum();
        prop_assert!(loss >= 0.0);
        prop_assert!((loss - expect).abs() <= 1e-12 * expect.max(1.0));
        prop_assert_eq!(sequence_loss(std::slice::from_ref(&gt), &gt, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn metrics_2d_orderings(pred in depth_map(6, 5), gt in sparse_grid(6, 5).prop_filter("needs a valid pixel", |g| g.valid_count() > 0)) {
        let m = metrics_2d(&pred, &gt).unwrap();
        prop_assert!(m.rmse >= m.mae - 1e-12);
        prop_assert!(m.delta_105 <= m.delta_125);
        let same = metrics_2d(&gt, &gt).unwrap();
        prop_assert_eq!((same.mae, same.rmse, same.delta_105), (0.0, 0.0, 1.0));
    }

    #[test]
    fn kd_tree_matches_brute_force(a in points(1..60), b in points(1..60)) {
        let tree = KdTree::build(&b);
        let brute = brute_force_nn(&a, &b).unwrap();
        for (p, d) in a.iter().zip(&brute) {
            prop_assert_eq!(tree.nearest_distance(p).unwrap(), *d);
        }
    }

    #[test]
    fn metrics_3d_swap_symmetry(a in points(1..40), b in points(1..40), t in 0.01..1.0f64) {
        let ab = metrics_3d(&a, &b, t).unwrap();
        let ba = metrics_3d(&b, &a, t).unwrap();
        prop_assert_eq!((ab.acc, ab.prec), (ba.comp, ba.recall));
        prop_assert_eq!((ab.chamfer, ab.fscore), (ba.chamfer, ba.fscore));
        let own = metrics_3d(&a, &a, t).unwrap();
        prop_assert_eq!((own.chamfer, own.fscore), (0.0, 1.0));
    }

    #[test]
    fn ply_round_trip(
        verts in prop::collection::vec(prop::array::uniform3(-100.0f32..100.0), 3..30),
        tri in prop::collection::vec(prop::array::uniform3(0u32..3), 0..20),
    ) {
        let mesh = Mesh { vertices: verts.iter().map(|v| v.map(f64::from)).collect(), triangles: tri };
        let mut buf = Vec::new();
        ply::write_ply(&mesh, &mut buf).unwrap();
        prop_assert_eq!(ply::read_ply(buf.as_slice()).unwrap(), mesh);
    }
}

fn sphere_error(voxel: f64) -> f64 {
    let scene = SceneSpec {
        primitives: vec![Primitive::Sphere { center: [0.0, 0.0, 2.0], radius: 0.5, texture: 0 }],
        textures: vec![Texture { seed: 0, cell: 0.2, octaves: 1, base: [0.5; 3], contrast: 0.2 }],
    };
    let k = cam(128, 128);
    let pose = RigidPose::identity();
    let depth = render_depth(&scene, &pose, &k);
    let mut vol = TsdfVolume::with_default_truncation([-0.6, -0.6, 1.3], [0.6, 0.6, 2.6], voxel);
    vol.integrate(&depth, &pose, &k);
    let mesh = extract_mesh(&vol).unwrap();
    let front: Vec<f64> = mesh
        .vertices
        .iter()
        .filter(|v| v[2] < 1.7)
        .map(|v| ((v[0] * v[0] + v[1] * v[1] + (v[2] - 2.0).powi(2)).sqrt() - 0.5).abs())
        .collect();
    assert!(!front.is_empty());
    front.iter().sum::<f64>() / front.len() as f64
}

#[test]
fn tsdf_error_shrinks_with_voxel_size() {
    let coarse = sphere_error(0.04);
    let fine = sphere_error(0.02);
    assert!(fine < coarse, "mean surface error {fine} at 2 cm vs {coarse} at 4 cm");
}
