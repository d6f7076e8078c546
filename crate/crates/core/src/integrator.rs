//! Iterative refinement of the 1/8-resolution depth from correlation,
//! monocular and sparse-depth cues.

use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::encoding::{
    build_correlation_volume, CorrelationVolume, EncodingError, FeatureGrid, HypothesisSet, D_MIN, PATCH,
};
use crate::geometry::{CameraIntrinsics, DepthMap, RigidPose};
use crate::nn::{Conv2d, ConvGru, Graph, Initializer, NodeId, ParamStore, Tensor};

/// Depth used to initialise every cell when no sparse sample is available.
pub const FALLBACK_DEPTH: f64 = 3.0;

/// Default number of refinement iterations.
pub const DEFAULT_ITERATIONS: usize = 10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegratorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegratorState {
    pub hidden: FeatureGrid,
    pub depth: DepthMap,
    pub iteration: usize,
}

/// Per-cell depth updates of one step, row-major at 1/8.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaMaps {
    pub width: usize,
    pub height: usize,
    pub delta_c: Vec<f64>,
    pub delta_d: Vec<f64>,
    pub delta_f: Vec<f64>,
}

/// Sparse cells keep their value; every other cell gets the mean of the
/// sparse values, or `fallback` when there are none.
pub fn init_depth(sparse: &DepthMap, fallback: f64) -> DepthMap {
    assert!(fallback > 0.0, "fallback depth must be positive");
    let valid: Vec<f64> = sparse.values().iter().copied().filter(|&v| v > 0.0).collect();
    let fill = if valid.is_empty() { fallback } else { valid.iter().sum::<f64>() / valid.len() as f64 };
    let values = sparse.values().iter().map(|&v| if v > 0.0 { v } else { fill }).collect();
    DepthMap::from_values(sparse.width(), sparse.height(), values).expect("same shape")
}

/// `sparse - current` where a sparse sample exists, else 0.
pub fn depth_delta(sparse: &DepthMap, current: &DepthMap) -> Result<Vec<f64>, IntegratorError> {
    if !sparse.same_shape(current) {
        return Err(IntegratorError::DimensionMismatch("sparse grid vs current depth".into()));
    }
    Ok(sparse
        .values()
        .iter()
        .zip(current.values())
        .map(|(&s, &d)| if s > 0.0 { s - d } else { 0.0 })
        .collect())
}

/// `tanh(conv3x3(mono8))`.
pub fn init_hidden(mono8: &FeatureGrid, params: &ParamStore, conv: &Conv2d) -> FeatureGrid {
    let mut g = Graph::new(params);
    let x = g.input(mono8.tensor().clone());
    let y = conv.forward(&mut g, x);
    let h = g.tanh(y);
    FeatureGrid::from_tensor(g.value(h).clone())
}

/// Channel widths of the learned operator.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OperatorConfig {
    pub corr: [usize; 2],
    pub depth: [usize; 2],
    pub motion: usize,
    pub hidden: usize,
    pub delta_c: usize,
    pub delta_f: usize,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self { corr: [64, 48], depth: [32, 16], motion: 32, hidden: 32, delta_c: 16, delta_f: 16 }
    }
}

impl OperatorConfig {
    pub fn toy() -> Self {
        Self { corr: [16, 12], depth: [8, 4], motion: 8, hidden: 8, delta_c: 4, delta_f: 4 }
    }
}

/// Learned update: correlation and depth encoders, two separable ConvGRUs,
/// and the ΔD_c / ΔD_f heads.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedOperator {
    pub config: OperatorConfig,
    pub mono_channels: usize,
    pub hidden_init: Conv2d,
    pub corr0: Conv2d,
    pub corr1: Conv2d,
    pub depth0: Conv2d,
    pub depth1: Conv2d,
    pub fuse: Conv2d,
    pub gru1: ConvGru,
    pub gru2: ConvGru,
    pub dc0: Conv2d,
    pub dc1: Conv2d,
    pub df0: Conv2d,
    pub df1: Conv2d,
}

/// Graph nodes produced by one learned step.
#[derive(Debug, Clone, Copy)]
pub struct StepNodes {
    pub hidden: NodeId,
    pub depth: NodeId,
    pub delta_c: NodeId,
    pub delta_d: NodeId,
    pub delta_f: NodeId,
}

impl LearnedOperator {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: OperatorConfig,
        corr_channels: usize,
        mono_channels: usize,
        init: &mut Initializer,
    ) -> Self {
        let c = config;
        let mut conv = |n: &str, i: usize, o: usize, k: (usize, usize)| Conv2d::new(store, &format!("{name}.{n}"), i, o, k, 1, init);
        let hidden_init = conv("hidden_init", mono_channels, c.hidden, (3, 3));
        let corr0 = conv("corr0", corr_channels, c.corr[0], (1, 1));
        let corr1 = conv("corr1", c.corr[0], c.corr[1], (3, 3));
        let depth0 = conv("depth0", 1, c.depth[0], (7, 7));
        let depth1 = conv("depth1", c.depth[0], c.depth[1], (3, 3));
        let fuse = conv("fuse", c.corr[1] + c.depth[1], c.motion - 1, (3, 3));
        let dc0 = conv("dc0", c.hidden, c.delta_c, (3, 3));
        let dc1 = conv("dc1", c.delta_c, 1, (3, 3));
        let df0 = conv("df0", c.hidden + 2, c.delta_f, (3, 3));
        let df1 = conv("df1", c.delta_f, 1, (3, 3));
        let gru1 = ConvGru::new(store, &format!("{name}.gru1"), c.hidden, c.motion + mono_channels, (1, 5), init);
        let gru2 = ConvGru::new(store, &format!("{name}.gru2"), c.hidden, 0, (5, 1), init);
        Self { config, mono_channels, hidden_init, corr0, corr1, depth0, depth1, fuse, gru1, gru2, dc0, dc1, df0, df1 }
    }

    pub fn init_hidden_graph(&self, g: &mut Graph, mono8: NodeId) -> NodeId {
        let y = self.hidden_init.forward(g, mono8);
        g.tanh(y)
    }

    /// One update on graph nodes. `corr` is the `[369, h, w]` volume built
    /// from the current depth value.
    pub fn step_graph(
        &self,
        g: &mut Graph,
        hidden: NodeId,
        corr: NodeId,
        depth: NodeId,
        mono8: NodeId,
        sparse: Arc<Vec<f64>>,
    ) -> StepNodes {
        let c = self.corr0.forward(g, corr);
        let c = g.relu(c);
        let c = self.corr1.forward(g, c);
        let c = g.relu(c);
        let d = self.depth0.forward(g, depth);
        let d = g.relu(d);
        let d = self.depth1.forward(g, d);
        let d = g.relu(d);
        let cd = g.concat(&[c, d]);
        let m = self.fuse.forward(g, cd);
        let m = g.relu(m);
        let x = g.concat(&[m, depth, mono8]);
        let h = self.gru1.forward(g, hidden, Some(x));
        let h = self.gru2.forward(g, h, None);
        let dc = self.dc0.forward(g, h);
        let dc = g.relu(dc);
        let delta_c = self.dc1.forward(g, dc);
        let delta_d = g.sparse_delta(depth, sparse);
        let hf = g.concat(&[h, delta_c, delta_d]);
        let df = self.df0.forward(g, hf);
        let df = g.relu(df);
        let delta_f = self.df1.forward(g, df);
        let sum = g.add(depth, delta_f);
        let depth = g.clamp_min(sum, D_MIN);
        StepNodes { hidden: h, depth, delta_c, delta_d, delta_f }
    }
}

/// The update rule applied at every iteration.
#[derive(Debug, Clone)]
pub enum UpdateOperator {
    /// Sparse cells jump to their measurement; other cells move by
    /// `damping` times the best-scoring hypothesis offset.
    Analytic { damping: f64 },
    Learned { params: Arc<ParamStore>, net: LearnedOperator },
}

impl UpdateOperator {
    pub fn analytic() -> Self {
        UpdateOperator::Analytic { damping: 0.5 }
    }

    /// Hidden state for a fresh run: `tanh(conv(mono8))` for the learned
    /// operator, a single zero channel for the analytic one.
    pub fn initial_hidden(&self, mono8: &FeatureGrid) -> FeatureGrid {
        match self {
            UpdateOperator::Analytic { .. } => FeatureGrid::zeros(1, mono8.width(), mono8.height()),
            UpdateOperator::Learned { params, net } => init_hidden(mono8, params, &net.hidden_init),
        }
    }
}

/// Index order for breaking argmax ties: the centre first, then
/// alternating outwards (`0, -1, +1, -2, +2, ...`).
fn tie_order(count: usize) -> Vec<usize> {
    let c = count / 2;
    let mut order = vec![c];
    for r in 1..=c {
        order.push(c - r);
        if c + r < count {
            order.push(c + r);
        }
    }
    order
}

/// Offset of the hypothesis with the highest centre-patch score at a cell.
pub fn argmax_offset(volume: &CorrelationVolume, offsets: &[f64], x: usize, y: usize) -> f64 {
    let centre = PATCH / 2;
    let mut best = volume.center_hypothesis();
    let mut best_score = volume.get(best, centre, x, y);
    for h in tie_order(volume.hypotheses).into_iter().skip(1) {
        let s = volume.get(h, centre, x, y);
        if s > best_score {
            best = h;
            best_score = s;
        }
    }
    offsets[best]
}

impl CorrelationVolume {
    pub fn center_hypothesis(&self) -> usize {
        self.hypotheses / 2
    }
}

/// One refinement step.
pub fn step(
    state: &IntegratorState,
    volume: &CorrelationVolume,
    mono8: &FeatureGrid,
    sparse: &DepthMap,
    op: &UpdateOperator,
    hyp: &HypothesisSet,
) -> Result<(IntegratorState, DeltaMaps), IntegratorError> {
    let (w, h) = (state.depth.width(), state.depth.height());
    let dims_ok = volume.width() == w
        && volume.height() == h
        && mono8.width() == w
        && mono8.height() == h
        && state.hidden.width() == w
        && state.hidden.height() == h
        && volume.hypotheses == hyp.count;
    if !dims_ok {
        return Err(IntegratorError::DimensionMismatch(format!("state is {w}x{h}")));
    }
    let delta_d = depth_delta(sparse, &state.depth)?;
    match op {
        UpdateOperator::Analytic { damping } => {
            let offsets = hyp.offsets();
            let mut delta_f = vec![0.0; w * h];
            let mut values = vec![0.0; w * h];
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let cur = state.depth.values()[p];
                    let s = sparse.values()[p];
                    if s > 0.0 {
                        delta_f[p] = delta_d[p];
                        values[p] = s.max(D_MIN);
                    } else {
                        delta_f[p] = damping * argmax_offset(volume, &offsets, x, y);
                        values[p] = (cur + delta_f[p]).max(D_MIN);
                    }
                }
            }
            let depth = DepthMap::from_values(w, h, values).expect("same shape");
            let state = IntegratorState { hidden: state.hidden.clone(), depth, iteration: state.iteration + 1 };
            let deltas = DeltaMaps { width: w, height: h, delta_c: vec![0.0; w * h], delta_d, delta_f };
            Ok((state, deltas))
        }
        UpdateOperator::Learned { params, net } => {
            if state.hidden.channels() != net.config.hidden || mono8.channels() != net.mono_channels {
                return Err(IntegratorError::DimensionMismatch("operator channel configuration".into()));
            }
            let mut g = Graph::new(params);
            let hidden = g.input(state.hidden.tensor().clone());
            let corr = g.input(volume.tensor().clone());
            let depth = g.input(Tensor::new(vec![1, h, w], state.depth.values().to_vec()));
            let mono = g.input(mono8.tensor().clone());
            let out = net.step_graph(&mut g, hidden, corr, depth, mono, Arc::new(sparse.values().to_vec()));
            let depth = DepthMap::from_values(w, h, g.value(out.depth).data().to_vec()).expect("same shape");
            let deltas = DeltaMaps {
                width: w,
                height: h,
                delta_c: g.value(out.delta_c).data().to_vec(),
                delta_d,
                delta_f: g.value(out.delta_f).data().to_vec(),
            };
            let hidden = FeatureGrid::from_tensor(g.value(out.hidden).clone());
            Ok((IntegratorState { hidden, depth, iteration: state.iteration + 1 }, deltas))
        }
    }
}

/// Everything a refinement run needs at 1/8 resolution.
#[derive(Debug, Clone)]
pub struct IntegratorInputs<'a> {
    pub target_features: &'a FeatureGrid,
    pub source_features: &'a FeatureGrid,
    pub mono8: &'a FeatureGrid,
    pub sparse: &'a DepthMap,
    pub k8: CameraIntrinsics,
    pub target_to_source: RigidPose,
    pub hypotheses: HypothesisSet,
    pub fallback: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub initial: DepthMap,
    /// Depth after each iteration.
    pub depths: Vec<DepthMap>,
    /// Hidden state after each iteration.
    pub hiddens: Vec<FeatureGrid>,
    pub initial_hidden: FeatureGrid,
    pub volume_time: Duration,
    pub update_time: Duration,
}

impl RunOutput {
    pub fn final_depth(&self) -> &DepthMap {
        self.depths.last().unwrap_or(&self.initial)
    }

    pub fn final_hidden(&self) -> &FeatureGrid {
        self.hiddens.last().unwrap_or(&self.initial_hidden)
    }
}

/// Runs `iterations` steps, rebuilding the correlation volume from the
/// current depth before each one.
pub fn run(inputs: &IntegratorInputs, iterations: usize, op: &UpdateOperator) -> Result<RunOutput, IntegratorError> {
    let initial = init_depth(inputs.sparse, inputs.fallback);
    let initial_hidden = op.initial_hidden(inputs.mono8);
    let mut state = IntegratorState { hidden: initial_hidden.clone(), depth: initial.clone(), iteration: 0 };
    let mut depths = Vec::with_capacity(iterations);
    let mut hiddens = Vec::with_capacity(iterations);
    let mut volume_time = Duration::ZERO;
    let mut update_time = Duration::ZERO;
    for _ in 0..iterations {
        let t0 = Instant::now();
        let volume = build_correlation_volume(
            inputs.target_features,
            inputs.source_features,
            &state.depth,
            &inputs.k8,
            &inputs.target_to_source,
            &inputs.hypotheses,
        )?;
        let t1 = Instant::now();
        let (next, _) = step(&state, &volume, inputs.mono8, inputs.sparse, op, &inputs.hypotheses)?;
        update_time += t1.elapsed();
        volume_time += t1 - t0;
        state = next;
        depths.push(state.depth.clone());
        hiddens.push(state.hidden.clone());
    }
    Ok(RunOutput { initial, depths, hiddens, initial_hidden, volume_time, update_time })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Initializer;

    fn sparse_map(values: &[f64], w: usize) -> DepthMap {
        DepthMap::from_values(w, values.len() / w, values.to_vec()).unwrap()
    }

    #[test]
    fn init_depth_examples() {
        let d = init_depth(&sparse_map(&[2.0, 0.0, 0.0, 4.0], 2), 3.0);
        assert_eq!(d.values(), &[2.0, 3.0, 3.0, 4.0]);
        let d = init_depth(&DepthMap::new(3, 2), 3.0);
        assert!(d.values().iter().all(|&v| v == 3.0));
        let d = init_depth(&sparse_map(&[0.0, 5.0, 0.0], 3), 3.0);
        assert_eq!(d.values(), &[5.0, 5.0, 5.0]);
    }

    #[test]
    fn depth_delta_examples() {
        let s = sparse_map(&[2.5, 0.0, 2.0], 3);
        let c = sparse_map(&[2.0, 7.0, 2.0], 3);
        assert_eq!(depth_delta(&s, &c).unwrap(), vec![0.5, 0.0, 0.0]);
        assert!(depth_delta(&s, &DepthMap::new(2, 1)).is_err());
    }

    #[test]
    fn tie_order_alternates_outwards() {
        assert_eq!(tie_order(5), vec![2, 1, 3, 0, 4]);
    }

    #[test]
    fn zero_weight_learned_operator_keeps_depth() {
        let mut store = ParamStore::new();
        let net = LearnedOperator::new(&mut store, "op", OperatorConfig::toy(), 369, 6, &mut Initializer::zeros());
        let op = UpdateOperator::Learned { params: Arc::new(store), net };
        let mono = FeatureGrid::zeros(6, 4, 3);
        let hidden = op.initial_hidden(&mono);
        assert!(hidden.tensor().data().iter().all(|&v| v == 0.0));
        let depth = DepthMap::from_values(4, 3, (1..=12).map(|i| i as f64 * 0.5).collect()).unwrap();
        let state = IntegratorState { hidden, depth: depth.clone(), iteration: 0 };
        let volume = CorrelationVolume::from_tensor(41, Tensor::zeros(vec![369, 3, 4]));
        let sparse = sparse_map(&[1.0; 12], 4);
        let (next, deltas) = step(&state, &volume, &mono, &sparse, &op, &HypothesisSet::default()).unwrap();
        assert_eq!(next.depth, depth);
        assert!(deltas.delta_f.iter().all(|&v| v == 0.0));
        assert_eq!(next.iteration, 1);
    }

    #[test]
    fn analytic_step_anchors_sparse_cells() {
        let sparse = sparse_map(&[1.25, 2.0, 0.0, 3.5], 2);
        let state = IntegratorState {
            hidden: FeatureGrid::zeros(1, 2, 2),
            depth: init_depth(&sparse, 3.0),
            iteration: 0,
        };
        let volume = CorrelationVolume::from_tensor(41, Tensor::zeros(vec![369, 2, 2]));
        let mono = FeatureGrid::zeros(3, 2, 2);
        let (next, d) = step(&state, &volume, &mono, &sparse, &UpdateOperator::analytic(), &HypothesisSet::default()).unwrap();
        assert_eq!(next.depth.values()[0], 1.25);
        assert_eq!(next.depth.values()[1], 2.0);
        assert_eq!(next.depth.values()[3], 3.5);
        // all-zero scores give a zero move
        assert_eq!(d.delta_f[2], 0.0);
        assert_eq!(next.depth.values()[2], state.depth.values()[2]);
    }

    #[test]
    fn analytic_step_moves_towards_peak() {
        let mut t = Tensor::zeros(vec![369, 1, 1]);
        // hypothesis 27 (offset +0.7) wins at the patch centre
        t.data_mut()[27 * 9 + 4] = 1.0;
        t.data_mut()[30 * 9] = 5.0;
        let volume = CorrelationVolume::from_tensor(41, t);
        let state = IntegratorState { hidden: FeatureGrid::zeros(1, 1, 1), depth: DepthMap::constant(1, 1, 2.0), iteration: 0 };
        let (next, _) = step(&state, &volume, &FeatureGrid::zeros(1, 1, 1), &DepthMap::new(1, 1), &UpdateOperator::analytic(), &HypothesisSet::default()).unwrap();
        assert!((next.depth.values()[0] - (2.0 + 0.5 * 0.7)).abs() < 1e-12);
    }

    #[test]
    fn depth_never_drops_below_minimum() {
        let mut t = Tensor::zeros(vec![369, 1, 1]);
        t.data_mut()[4] = 1.0;
        let volume = CorrelationVolume::from_tensor(41, t);
        let state = IntegratorState { hidden: FeatureGrid::zeros(1, 1, 1), depth: DepthMap::constant(1, 1, 0.3), iteration: 0 };
        let (next, _) = step(&state, &volume, &FeatureGrid::zeros(1, 1, 1), &DepthMap::new(1, 1), &UpdateOperator::analytic(), &HypothesisSet::default()).unwrap();
        assert_eq!(next.depth.values()[0], D_MIN);
    }
}
