//! Cascaded 2x convex upsampling from 1/8 to full resolution.

use std::sync::Arc;

use thiserror::Error;

use crate::encoding::{FeatureGrid, MonocularPyramid};
use crate::geometry::DepthMap;
use crate::nn::{Conv2d, Graph, Initializer, NodeId, ParamStore, Tensor};

/// Mask channels per coarse cell: 2x2 children times a 3x3 neighbourhood.
pub const MASK_CHANNELS: usize = 36;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecoderError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Softmax-normalised upsampling weights, `(h, w, 2, 2, 9)`.
#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleMask {
    pub width: usize,
    pub height: usize,
    weights: Vec<[f64; 9]>,
}

impl UpsampleMask {
    /// Normalises `[36, h, w]` logits; channel `(a*2 + b)*9 + k` scores
    /// neighbour `k = ky*3 + kx` for child `(a, b)`.
    pub fn from_logits(logits: &[f64], width: usize, height: usize) -> Self {
        assert_eq!(logits.len(), MASK_CHANNELS * width * height);
        let n = width * height;
        let mut weights = vec![[0.0; 9]; 4 * n];
        for p in 0..n {
            for child in 0..4 {
                let mut l = [0.0; 9];
                for k in 0..9 {
                    l[k] = logits[(child * 9 + k) * n + p];
                }
                weights[p * 4 + child] = softmax9(&l);
            }
        }
        Self { width, height, weights }
    }

    pub fn uniform(width: usize, height: usize) -> Self {
        Self::from_logits(&vec![0.0; MASK_CHANNELS * width * height], width, height)
    }

    /// Builds a mask from explicit weights; each group is used as given.
    pub fn from_weights(width: usize, height: usize, weights: Vec<[f64; 9]>) -> Self {
        assert_eq!(weights.len(), 4 * width * height);
        Self { width, height, weights }
    }

    /// Weights of child `(a, b)` of coarse cell `(x, y)`.
    pub fn weights(&self, x: usize, y: usize, a: usize, b: usize) -> &[f64; 9] {
        &self.weights[(y * self.width + x) * 4 + a * 2 + b]
    }
}

fn softmax9(l: &[f64; 9]) -> [f64; 9] {
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut e = [0.0; 9];
    let mut sum = 0.0;
    for k in 0..9 {
        e[k] = (l[k] - max).exp();
        sum += e[k];
    }
    e.map(|v| v / sum)
}

#[inline]
fn neighbour(coarse: &[f64], w: usize, h: usize, x: usize, y: usize, k: usize) -> (usize, f64) {
    let nx = (x as i64 + (k % 3) as i64 - 1).clamp(0, w as i64 - 1) as usize;
    let ny = (y as i64 + (k / 3) as i64 - 1).clamp(0, h as i64 - 1) as usize;
    let idx = ny * w + nx;
    (idx, coarse[idx])
}

fn upsample_with(coarse: &[f64], w: usize, h: usize, mask: &UpsampleMask) -> Vec<f64> {
    let fw = 2 * w;
    let mut fine = vec![0.0; 4 * w * h];
    for y in 0..h {
        for x in 0..w {
            for a in 0..2 {
                for b in 0..2 {
                    let wk = mask.weights(x, y, a, b);
                    let mut acc = 0.0;
                    for (k, wv) in wk.iter().enumerate() {
                        acc += wv * neighbour(coarse, w, h, x, y, k).1;
                    }
                    fine[(2 * y + a) * fw + 2 * x + b] = acc;
                }
            }
        }
    }
    fine
}

/// Fine pixel `(2y+a, 2x+b)` is the mask-weighted sum over the
/// edge-replicated 3x3 neighbourhood of coarse cell `(x, y)`.
pub fn convex_upsample(coarse: &DepthMap, mask: &UpsampleMask) -> Result<DepthMap, DecoderError> {
    if (coarse.width(), coarse.height()) != (mask.width, mask.height) {
        return Err(DecoderError::DimensionMismatch(format!(
            "coarse {}x{} vs mask {}x{}",
            coarse.width(),
            coarse.height(),
            mask.width,
            mask.height
        )));
    }
    let fine = upsample_with(coarse.values(), coarse.width(), coarse.height(), mask);
    Ok(DepthMap::from_values(2 * coarse.width(), 2 * coarse.height(), fine).expect("2x shape"))
}

/// Convex upsampling from raw mask logits; shared by the graph op and the
/// uniform decoder.
pub fn convex_upsample_raw(coarse: &[f64], w: usize, h: usize, logits: &[f64]) -> Vec<f64> {
    upsample_with(coarse, w, h, &UpsampleMask::from_logits(logits, w, h))
}

/// Gradients of [`convex_upsample_raw`] with respect to the coarse map and
/// the logits.
pub fn convex_upsample_backward(coarse: &[f64], w: usize, h: usize, logits: &[f64], grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mask = UpsampleMask::from_logits(logits, w, h);
    let n = w * h;
    let fw = 2 * w;
    let mut dc = vec![0.0; n];
    let mut dl = vec![0.0; logits.len()];
    for y in 0..h {
        for x in 0..w {
            for a in 0..2 {
                for b in 0..2 {
                    let g = grad[(2 * y + a) * fw + 2 * x + b];
                    let wk = mask.weights(x, y, a, b);
                    let mut vals = [0.0; 9];
                    let mut out = 0.0;
                    for k in 0..9 {
                        let (idx, v) = neighbour(coarse, w, h, x, y, k);
                        vals[k] = v;
                        out += wk[k] * v;
                        dc[idx] += g * wk[k];
                    }
                    for k in 0..9 {
                        dl[((a * 2 + b) * 9 + k) * n + y * w + x] = g * wk[k] * (vals[k] - out);
                    }
                }
            }
        }
    }
    (dc, dl)
}

/// Two 3x3 convolutions emitting 36 mask logits and `feats` features.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderStage {
    pub scale: usize,
    pub conv0: Conv2d,
    pub conv1: Conv2d,
    pub feats: usize,
}

impl DecoderStage {
    fn new(store: &mut ParamStore, name: &str, scale: usize, in_ch: usize, feats: usize, init: &mut Initializer) -> Self {
        let width = MASK_CHANNELS + feats;
        Self {
            scale,
            conv0: Conv2d::new(store, &format!("{name}.conv0"), in_ch, width, (3, 3), 1, init),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), width, width, (3, 3), 1, init),
            feats,
        }
    }

    /// Returns `(mask logits, features)`; features are `None` when the stage
    /// emits none.
    fn forward(&self, g: &mut Graph, x: NodeId) -> (NodeId, Option<NodeId>) {
        let y = self.conv0.forward(g, x);
        let y = g.relu(y);
        let y = self.conv1.forward(g, y);
        let mask = g.channel_slice(y, 0, MASK_CHANNELS);
        let feats = (self.feats > 0).then(|| g.channel_slice(y, MASK_CHANNELS, self.feats));
        (mask, feats)
    }
}

/// The three learned stages at scales 8, 4 and 2.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderNet {
    pub stages: [DecoderStage; 3],
}

impl DecoderNet {
    /// `mono` lists pyramid channels at scales 2, 4, 8; `feats` is
    /// `(M_8, M_4)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        mono: [usize; 3],
        feats: [usize; 2],
        init: &mut Initializer,
    ) -> Self {
        let s8 = DecoderStage::new(store, &format!("{name}.theta8"), 8, hidden + mono[2] + 1, feats[0], init);
        let s4 = DecoderStage::new(store, &format!("{name}.theta4"), 4, mono[1] + 1 + feats[0], feats[1], init);
        let s2 = DecoderStage::new(store, &format!("{name}.theta2"), 2, mono[0] + 1 + feats[1], 0, init);
        Self { stages: [s8, s4, s2] }
    }

    /// Full-resolution depth from graph nodes: `depth8` `[1, h, w]`,
    /// `hidden`, and the pyramid at scales 2, 4, 8.
    pub fn forward(&self, g: &mut Graph, depth8: NodeId, hidden: NodeId, mono: [NodeId; 3]) -> NodeId {
        let x = g.concat(&[hidden, mono[2], depth8]);
        let (mask, feats) = self.stages[0].forward(g, x);
        let d4 = g.convex_upsample(depth8, mask);
        let f = feats.expect("theta8 emits features");
        let f = g.nearest_up2(f);
        let x = g.concat(&[mono[1], d4, f]);
        let (mask, feats) = self.stages[1].forward(g, x);
        let d2 = g.convex_upsample(d4, mask);
        let f = feats.expect("theta4 emits features");
        let f = g.nearest_up2(f);
        let x = g.concat(&[mono[0], d2, f]);
        let (mask, _) = self.stages[2].forward(g, x);
        g.convex_upsample(d2, mask)
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    /// Zero-logit masks at every stage.
    Uniform,
    Learned { params: Arc<ParamStore>, net: DecoderNet },
}

/// Decodes the 1/8 depth to full resolution.
pub fn decode(depth8: &DepthMap, hidden: &FeatureGrid, pyramid: &MonocularPyramid, decoder: &Decoder) -> Result<DepthMap, DecoderError> {
    let (w, h) = (depth8.width(), depth8.height());
    let levels_ok = pyramid.levels.iter().zip([4usize, 2, 1]).all(|(l, s)| l.width() == w * s && l.height() == h * s);
    if !levels_ok || hidden.width() != w || hidden.height() != h {
        return Err(DecoderError::DimensionMismatch(format!("depth {w}x{h} vs hidden/pyramid")));
    }
    match decoder {
        Decoder::Uniform => {
            let mut cur = depth8.clone();
            for _ in 0..3 {
                cur = convex_upsample(&cur, &UpsampleMask::uniform(cur.width(), cur.height()))?;
            }
            Ok(cur)
        }
        Decoder::Learned { params, net } => {
            let mut g = Graph::new(params);
            let d = g.input(Tensor::new(vec![1, h, w], depth8.values().to_vec()));
            let hid = g.input(hidden.tensor().clone());
            let mono = [0, 1, 2].map(|i| g.input(pyramid.levels[i].tensor().clone()));
            let out = net.forward(&mut g, d, hid, mono);
            Ok(DepthMap::from_values(8 * w, 8 * h, g.value(out).data().to_vec()).expect("8x shape"))
        }
    }
}
