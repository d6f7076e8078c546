//! Feature extraction at 1/8 resolution, monocular pyramids, and the
//! epipolar correlation volume.

use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{project_point, CameraIntrinsics, DepthMap, PixelCoord, RigidPose};
use crate::nn::{Conv2d, Graph, Initializer, NodeId, ParamStore, Tensor};
use crate::raster::ColorImage;

/// Smallest depth any hypothesis is allowed to take.
pub const D_MIN: f64 = 0.05;

/// Channels produced by [`DescriptorEncoder`].
pub const DESCRIPTOR_CHANNELS: usize = 24;

/// Entries per hypothesis in the correlation volume.
pub const PATCH: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncodingError {
    #[error("image dimensions {0}x{1} are not divisible by 8")]
    BadDimensions(usize, usize),
    #[error("coordinate ({0}, {1}) is outside the feature grid")]
    OutOfBounds(f64, f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Channel-major `[c, h, w]` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    tensor: Tensor,
}

impl FeatureGrid {
    pub fn from_tensor(tensor: Tensor) -> Self {
        tensor.chw();
        Self { tensor }
    }

    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        Self { tensor: Tensor::zeros(vec![channels, height, width]) }
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    #[inline]
    pub fn get(&self, f: usize, x: usize, y: usize) -> f64 {
        self.tensor.data()[(f * self.height() + y) * self.width() + x]
    }

    /// Feature vector at an integer cell.
    pub fn vector(&self, x: usize, y: usize) -> Vec<f64> {
        (0..self.channels()).map(|f| self.get(f, x, y)).collect()
    }

    /// Bilinear sample of every channel; `None` outside `[0, w-1] x [0, h-1]`.
    pub fn sample_bilinear(&self, q: PixelCoord) -> Option<Vec<f64>> {
        let taps = bilinear_taps(q.u, q.v, self.width(), self.height())?;
        let n = self.width() * self.height();
        Some((0..self.channels()).map(|f| taps.apply(&self.tensor.data()[f * n..(f + 1) * n])).collect())
    }
}

/// Four bilinear interpolation taps into a row-major plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Taps {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

impl Taps {
    #[inline]
    pub fn apply(&self, plane: &[f64]) -> f64 {
        self.w[0] * plane[self.idx[0]]
            + self.w[1] * plane[self.idx[1]]
            + self.w[2] * plane[self.idx[2]]
            + self.w[3] * plane[self.idx[3]]
    }
}

/// Coordinates this close outside the grid are clamped onto it, so that
/// round-off in a projection does not flip a border sample to zero.
pub const BOUNDS_TOLERANCE: f64 = 1e-9;

pub fn bilinear_taps(u: f64, v: f64, width: usize, height: usize) -> Option<Taps> {
    let (wm, hm) = ((width - 1) as f64, (height - 1) as f64);
    let t = BOUNDS_TOLERANCE;
    if !(u >= -t && v >= -t && u <= wm + t && v <= hm + t) {
        return None;
    }
    let (u, v) = (u.clamp(0.0, wm), v.clamp(0.0, hm));
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    Some(Taps {
        idx: [y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1],
        w: [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
    })
}

/// `(1/√F) Σ_f ft[f, p] · sample(fs, f)` for channel-major buffers with `n`
/// cells per channel.
#[inline]
fn correlate(ft: &[f64], fs: &[f64], channels: usize, n: usize, p: usize, taps: &Taps) -> f64 {
    let mut acc = 0.0;
    for f in 0..channels {
        acc += ft[f * n + p] * taps.apply(&fs[f * n..(f + 1) * n]);
    }
    acc / (channels as f64).sqrt()
}

/// Correlation between the target feature at integer cell `q_t` and the
/// source features bilinearly sampled at `q_s`.
pub fn correlation_score(ft: &FeatureGrid, fs: &FeatureGrid, q_t: PixelCoord, q_s: PixelCoord) -> Result<f64, EncodingError> {
    if ft.channels() != fs.channels() || ft.width() != fs.width() || ft.height() != fs.height() {
        return Err(EncodingError::DimensionMismatch("target and source grids differ".into()));
    }
    let (w, h) = (ft.width(), ft.height());
    let inside = q_t.u >= 0.0 && q_t.v >= 0.0 && q_t.u <= (w - 1) as f64 && q_t.v <= (h - 1) as f64;
    if !inside || q_t.u.fract() != 0.0 || q_t.v.fract() != 0.0 {
        return Err(EncodingError::OutOfBounds(q_t.u, q_t.v));
    }
    let taps = bilinear_taps(q_s.u, q_s.v, w, h).ok_or(EncodingError::OutOfBounds(q_s.u, q_s.v))?;
    let p = q_t.v as usize * w + q_t.u as usize;
    Ok(correlate(ft.tensor.data(), fs.tensor.data(), ft.channels(), w * h, p, &taps))
}

/// Depth offsets sampled around the current estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypothesisSet {
    pub count: usize,
    pub spacing: f64,
}

impl Default for HypothesisSet {
    fn default() -> Self {
        Self { count: 41, spacing: 0.1 }
    }
}

impl HypothesisSet {
    /// `(k - (count-1)/2) * spacing` for `k = 0..count`.
    pub fn offsets(&self) -> Vec<f64> {
        let half = (self.count / 2) as f64;
        (0..self.count).map(|k| (k as f64 - half) * self.spacing).collect()
    }

    pub fn channels(&self) -> usize {
        self.count * PATCH
    }

    pub fn center(&self) -> usize {
        self.count / 2
    }
}

/// Sample locations of a correlation volume: per output channel and target
/// cell, the bilinear taps into the source grid (or nothing).
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationPlan {
    width: usize,
    height: usize,
    hypotheses: usize,
    taps: Vec<Option<Taps>>,
}

impl CorrelationPlan {
    /// For every cell and hypothesis `δ`, projects the cell at depth
    /// `max(D + δ, D_MIN)` into the source view and places a 3x3 unit-offset
    /// patch around the projection.
    pub fn new(depth: &DepthMap, k8: &CameraIntrinsics, target_to_source: &RigidPose, hyp: &HypothesisSet) -> Self {
        let (w, h) = (depth.width(), depth.height());
        let n = w * h;
        let offsets = hyp.offsets();
        let mut taps = vec![None; hyp.channels() * n];
        let per_cell: Vec<Vec<Option<Taps>>> = (0..n)
            .into_par_iter()
            .map(|p| {
                let q = PixelCoord::new((p % w) as f64, (p / w) as f64);
                let d = depth.values()[p];
                let mut out = vec![None; hyp.channels()];
                for (hi, off) in offsets.iter().enumerate() {
                    let dh = (d + off).max(D_MIN);
                    let Ok((qs, _)) = project_point(q, dh, k8, target_to_source) else { continue };
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let u = qs.u + (kx as f64 - 1.0);
                            let v = qs.v + (ky as f64 - 1.0);
                            out[hi * PATCH + ky * 3 + kx] = bilinear_taps(u, v, w, h);
                        }
                    }
                }
                out
            })
            .collect();
        for (p, cell) in per_cell.into_iter().enumerate() {
            for (c, t) in cell.into_iter().enumerate() {
                taps[c * n + p] = t;
            }
        }
        Self { width: w, height: h, hypotheses: hyp.count, taps }
    }

    pub fn channels(&self) -> usize {
        self.hypotheses * PATCH
    }

    pub fn taps(&self, channel: usize, x: usize, y: usize) -> Option<Taps> {
        self.taps[channel * self.width * self.height + y * self.width + x]
    }

    fn check(&self, t: &Tensor) -> (usize, usize) {
        let (c, h, w) = t.chw();
        assert_eq!((w, h), (self.width, self.height), "feature grid does not match the plan");
        (c, w * h)
    }

    pub fn evaluate(&self, ft: &Tensor, fs: &Tensor) -> Tensor {
        let (channels, n) = self.check(ft);
        assert_eq!(fs.shape(), ft.shape());
        let mut out = vec![0.0; self.channels() * n];
        out.par_chunks_mut(n).enumerate().for_each(|(c, plane)| {
            for (p, o) in plane.iter_mut().enumerate() {
                if let Some(t) = &self.taps[c * n + p] {
                    *o = correlate(ft.data(), fs.data(), channels, n, p, t);
                }
            }
        });
        Tensor::new(vec![self.channels(), self.height, self.width], out)
    }

    /// Gradients with respect to the target and source features.
    pub fn backward(&self, ft: &Tensor, fs: &Tensor, grad: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (channels, n) = self.check(ft);
        let scale = 1.0 / (channels as f64).sqrt();
        let mut dft = vec![0.0; ft.len()];
        let mut dfs = vec![0.0; fs.len()];
        let (ftd, fsd) = (ft.data(), fs.data());
        for c in 0..self.channels() {
            for p in 0..n {
                let Some(t) = &self.taps[c * n + p] else { continue };
                let g = grad[c * n + p] * scale;
                if g == 0.0 {
                    continue;
                }
                for f in 0..channels {
                    let plane = f * n;
                    dft[plane + p] += g * t.apply(&fsd[plane..plane + n]);
                    let a = g * ftd[plane + p];
                    for j in 0..4 {
                        dfs[plane + t.idx[j]] += a * t.w[j];
                    }
                }
            }
        }
        (dft, dfs)
    }
}

/// Correlation scores for every cell, hypothesis and patch entry. Channel
/// `h * 9 + ky * 3 + kx` holds hypothesis `h` at patch offset
/// `(kx - 1, ky - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationVolume {
    pub hypotheses: usize,
    tensor: Tensor,
}

impl CorrelationVolume {
    pub fn from_tensor(hypotheses: usize, tensor: Tensor) -> Self {
        assert_eq!(tensor.chw().0, hypotheses * PATCH);
        Self { hypotheses, tensor }
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    #[inline]
    pub fn get(&self, hypothesis: usize, patch: usize, x: usize, y: usize) -> f64 {
        let c = hypothesis * PATCH + patch;
        self.tensor.data()[(c * self.height() + y) * self.width() + x]
    }
}

pub fn build_correlation_volume(
    ft: &FeatureGrid,
    fs: &FeatureGrid,
    depth: &DepthMap,
    k8: &CameraIntrinsics,
    target_to_source: &RigidPose,
    hyp: &HypothesisSet,
) -> Result<CorrelationVolume, EncodingError> {
    if ft.tensor.shape() != fs.tensor.shape() || ft.width() != depth.width() || ft.height() != depth.height() {
        return Err(EncodingError::DimensionMismatch(format!(
            "features {:?}/{:?} vs depth {}x{}",
            ft.tensor.shape(),
            fs.tensor.shape(),
            depth.width(),
            depth.height()
        )));
    }
    let plan = CorrelationPlan::new(depth, k8, target_to_source, hyp);
    Ok(CorrelationVolume { hypotheses: hyp.count, tensor: plan.evaluate(&ft.tensor, &fs.tensor) })
}

/// Handcrafted descriptor on the Gaussian-blurred luminance (sigma 4 px):
/// a mean-removed 4x4 lattice of intensities at offsets `{-9,-3,3,9}` px
/// around fine pixel `(8x, 8y)`, plus x and y gradients at the four
/// `(+-4, +-4)` offsets, scaled to norm `F^(1/4)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DescriptorEncoder;

const DESCRIPTOR_SIGMA: f64 = 4.0;
const GRADIENT_GAIN: f64 = 6.0;

fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let pass = |input: &[f64], horizontal: bool| {
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (j, k) in kernel.iter().enumerate() {
                    let o = j as i64 - r;
                    let (sx, sy) = if horizontal {
                        ((x as i64 + o).clamp(0, w as i64 - 1) as usize, y)
                    } else {
                        (x, (y as i64 + o).clamp(0, h as i64 - 1) as usize)
                    };
                    acc += k * input[sy * w + sx];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    pass(&pass(src, true), false)
}

impl DescriptorEncoder {
    pub fn encode(&self, image: &ColorImage) -> FeatureGrid {
        let (w, h) = (image.width(), image.height());
        let lum = gaussian_blur(&image.luminance(), w, h, DESCRIPTOR_SIGMA);
        let at = |x: i64, y: i64| lum[(y.clamp(0, h as i64 - 1) as usize) * w + x.clamp(0, w as i64 - 1) as usize];
        let (gw, gh) = (w / 8, h / 8);
        let n = gw * gh;
        let mut data = vec![0.0; DESCRIPTOR_CHANNELS * n];
        let norm_target = (DESCRIPTOR_CHANNELS as f64).powf(0.25);
        const LATTICE: [i64; 4] = [-9, -3, 3, 9];
        for cy in 0..gh {
            for cx in 0..gw {
                let (px, py) = (8 * cx as i64, 8 * cy as i64);
                let mut v = [0.0; DESCRIPTOR_CHANNELS];
                for (j, dy) in LATTICE.iter().enumerate() {
                    for (i, dx) in LATTICE.iter().enumerate() {
                        v[j * 4 + i] = at(px + dx, py + dy);
                    }
                }
                for (q, (dx, dy)) in [(-4, -4), (4, -4), (-4, 4), (4, 4)].iter().enumerate() {
                    let (x, y) = (px + dx, py + dy);
                    v[16 + q] = GRADIENT_GAIN * (at(x + 1, y) - at(x - 1, y));
                    v[20 + q] = GRADIENT_GAIN * (at(x, y + 1) - at(x, y - 1));
                }
                let mean = v[..16].iter().sum::<f64>() / 16.0;
                v[..16].iter_mut().for_each(|a| *a -= mean);
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                let scale = if norm > 1e-9 { norm_target / norm } else { 0.0 };
                let p = cy * gw + cx;
                for (f, a) in v.iter().enumerate() {
                    data[f * n + p] = a * scale;
                }
            }
        }
        FeatureGrid::from_tensor(Tensor::new(vec![DESCRIPTOR_CHANNELS, gh, gw], data))
    }

    /// Block-mean colour at scales 2, 4 and 8, centred like the descriptor.
    pub fn pyramid(&self, image: &ColorImage) -> MonocularPyramid {
        let levels = [2usize, 4, 8].map(|s| {
            let (gw, gh) = (image.width() / s, image.height() / s);
            let n = gw * gh;
            let mut data = vec![0.0; 3 * n];
            let half = (s / 2) as i64;
            for y in 0..gh {
                for x in 0..gw {
                    let mut acc = [0.0; 3];
                    for dy in 0..s as i64 {
                        for dx in 0..s as i64 {
                            let px = (x as i64 * s as i64 - half + dx).clamp(0, image.width() as i64 - 1) as usize;
                            let py = (y as i64 * s as i64 - half + dy).clamp(0, image.height() as i64 - 1) as usize;
                            let c = image.get(px, py);
                            for ch in 0..3 {
                                acc[ch] += c[ch];
                            }
                        }
                    }
                    for ch in 0..3 {
                        data[ch * n + y * gw + x] = acc[ch] / (s * s) as f64 - 0.5;
                    }
                }
            }
            FeatureGrid::from_tensor(Tensor::new(vec![3, gh, gw], data))
        });
        MonocularPyramid { levels }
    }
}

/// Three stride-2 3x3 convolutions; ReLU after every stage except,
/// optionally, the last.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvEncoder {
    pub stages: Vec<Conv2d>,
    pub linear_last: bool,
}

impl ConvEncoder {
    pub fn new(store: &mut ParamStore, name: &str, channels: [usize; 3], linear_last: bool, init: &mut Initializer) -> Self {
        let mut prev = 3;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(store, &format!("{name}.stage{i}"), prev, c, (3, 3), 2, init);
                prev = c;
                conv
            })
            .collect();
        Self { stages, linear_last, }
    }

    /// Outputs at 1/2, 1/4 and 1/8.
    pub fn forward(&self, g: &mut Graph, image: NodeId) -> [NodeId; 3] {
        let mut x = image;
        let mut outs = [image; 3];
        for (i, conv) in self.stages.iter().enumerate() {
            x = conv.forward(g, x);
            if !(self.linear_last && i == self.stages.len() - 1) {
                x = g.relu(x);
            }
            outs[i] = x;
        }
        outs
    }

    pub fn channels(&self) -> [usize; 3] {
        [self.stages[0].out_ch, self.stages[1].out_ch, self.stages[2].out_ch]
    }
}

/// Either the handcrafted encoder or a learned one with its weights.
#[derive(Debug, Clone)]
pub enum EncoderHandle {
    Descriptor,
    Learned { params: Arc<ParamStore>, net: ConvEncoder },
}

impl EncoderHandle {
    pub fn feature_channels(&self) -> usize {
        match self {
            EncoderHandle::Descriptor => DESCRIPTOR_CHANNELS,
            EncoderHandle::Learned { net, .. } => net.channels()[2],
        }
    }

    pub fn pyramid_channels(&self) -> [usize; 3] {
        match self {
            EncoderHandle::Descriptor => [3; 3],
            EncoderHandle::Learned { net, .. } => net.channels(),
        }
    }

    fn run_learned(params: &ParamStore, net: &ConvEncoder, image: &ColorImage) -> [Tensor; 3] {
        let mut g = Graph::new(params);
        let x = g.input(image.to_tensor());
        let outs = net.forward(&mut g, x);
        outs.map(|n| g.value(n).clone())
    }
}

/// The monocular feature pyramid at scales 2, 4 and 8.
#[derive(Debug, Clone, PartialEq)]
pub struct MonocularPyramid {
    pub levels: [FeatureGrid; 3],
}

impl MonocularPyramid {
    pub fn level(&self, scale: usize) -> &FeatureGrid {
        match scale {
            2 => &self.levels[0],
            4 => &self.levels[1],
            8 => &self.levels[2],
            _ => panic!("no pyramid level at scale {scale}"),
        }
    }
}

fn check_dims(image: &ColorImage) -> Result<(), EncodingError> {
    let (w, h) = (image.width(), image.height());
    if w == 0 || h == 0 || w % 8 != 0 || h % 8 != 0 {
        return Err(EncodingError::BadDimensions(w, h));
    }
    Ok(())
}

/// Geometry features at exactly `(H/8, W/8)`.
pub fn extract_features(image: &ColorImage, encoder: &EncoderHandle) -> Result<FeatureGrid, EncodingError> {
    check_dims(image)?;
    Ok(match encoder {
        EncoderHandle::Descriptor => DescriptorEncoder.encode(image),
        EncoderHandle::Learned { params, net } => {
            let [_, _, f8] = EncoderHandle::run_learned(params, net, image);
            FeatureGrid::from_tensor(f8)
        }
    })
}

pub fn extract_monocular(image: &ColorImage, encoder: &EncoderHandle) -> Result<MonocularPyramid, EncodingError> {
    check_dims(image)?;
    Ok(match encoder {
        EncoderHandle::Descriptor => DescriptorEncoder.pyramid(image),
        EncoderHandle::Learned { params, net } => {
            let levels = EncoderHandle::run_learned(params, net, image).map(FeatureGrid::from_tensor);
            MonocularPyramid { levels }
        }
    })
}
