use std::sync::Arc;

use super::conv::{self, ConvShape};
use super::{Gradients, ParamId, ParamStore, Tensor};
use crate::decoder::{convex_upsample_backward, convex_upsample_raw};
use crate::encoding::CorrelationPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d { x: NodeId, w: NodeId, b: NodeId, shape: ConvShape },
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    OneMinus(NodeId),
    Concat(Vec<NodeId>),
    ChannelSlice { x: NodeId, start: usize },
    ClampMin(NodeId, f64),
    SparseDelta { depth: NodeId, sparse: Arc<Vec<f64>> },
    ConvexUpsample { coarse: NodeId, logits: NodeId },
    NearestUp2(NodeId),
    Correlation { ft: NodeId, fs: NodeId, plan: Arc<CorrelationPlan> },
    MaskedL1 { pred: NodeId, target: Arc<Vec<f64>>, count: usize },
    WeightedSum(Vec<(NodeId, f64)>),
    DotConst { x: NodeId, coeffs: Arc<Vec<f64>> },
}

/// One recorded forward pass.
pub struct Graph<'p> {
    params: &'p ParamStore,
    values: Vec<Tensor>,
    ops: Vec<Op>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, values: Vec::new(), ops: Vec::new(), param_nodes: vec![None; params.len()] }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        NodeId(self.values.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.index()] {
            return n;
        }
        let n = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_nodes[id.index()] = Some(n);
        n
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: (usize, usize)) -> NodeId {
        let (in_ch, in_h, in_w) = self.values[x.0].chw();
        let ws = self.values[w.0].shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], in_ch, "conv input channels");
        let shape = ConvShape { in_ch, out_ch: ws[0], in_h, in_w, kh: ws[2], kw: ws[3], stride, pad_h: pad.0, pad_w: pad.1 };
        let y = conv::forward(self.values[x.0].data(), self.values[w.0].data(), self.values[b.0].data(), &shape);
        self.push(Tensor::new(vec![shape.out_ch, shape.out_h(), shape.out_w()], y), Op::Conv2d { x, w, b, shape })
    }

    fn map(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let t = &self.values[x.0];
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        self.push(out, op)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        self.map(x, |v| 1.0 - v, Op::OneMinus(x))
    }

    pub fn clamp_min(&mut self, x: NodeId, min: f64) -> NodeId {
        self.map(x, |v| v.max(min), Op::ClampMin(x, min))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data);
        self.push(out, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Channel-wise concatenation of `[c_i, h, w]` tensors.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let (_, h, w) = self.values[parts[0].0].chw();
        let mut c_total = 0;
        let mut data = Vec::new();
        for p in parts {
            let (c, ph, pw) = self.values[p.0].chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            c_total += c;
            data.extend_from_slice(self.values[p.0].data());
        }
        self.push(Tensor::new(vec![c_total, h, w], data), Op::Concat(parts.to_vec()))
    }

    pub fn channel_slice(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let (c, h, w) = self.values[x.0].chw();
        assert!(start + len <= c);
        let plane = h * w;
        let data = self.values[x.0].data()[start * plane..(start + len) * plane].to_vec();
        self.push(Tensor::new(vec![len, h, w], data), Op::ChannelSlice { x, start })
    }

    /// `sparse - depth` where `sparse > 0`, zero elsewhere.
    pub fn sparse_delta(&mut self, depth: NodeId, sparse: Arc<Vec<f64>>) -> NodeId {
        let t = &self.values[depth.0];
        assert_eq!(t.len(), sparse.len());
        let data = t.data().iter().zip(sparse.iter()).map(|(&d, &s)| if s > 0.0 { s - d } else { 0.0 }).collect();
        let out = Tensor::new(t.shape().to_vec(), data);
        self.push(out, Op::SparseDelta { depth, sparse })
    }

    /// 2x convex upsampling of a `[1, h, w]` map with `[36, h, w]` mask logits.
    pub fn convex_upsample(&mut self, coarse: NodeId, logits: NodeId) -> NodeId {
        let (c, h, w) = self.values[coarse.0].chw();
        assert_eq!(c, 1);
        assert_eq!(self.values[logits.0].shape(), &[36, h, w]);
        let fine = convex_upsample_raw(self.values[coarse.0].data(), w, h, self.values[logits.0].data());
        self.push(Tensor::new(vec![1, 2 * h, 2 * w], fine), Op::ConvexUpsample { coarse, logits })
    }

    pub fn nearest_up2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.values[x.0].chw();
        let src = self.values[x.0].data();
        let mut data = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.push(Tensor::new(vec![c, 2 * h, 2 * w], data), Op::NearestUp2(x))
    }

    /// Correlation volume between target features and source features at
    /// precomputed sample locations.
    pub fn correlation(&mut self, ft: NodeId, fs: NodeId, plan: Arc<CorrelationPlan>) -> NodeId {
        let out = plan.evaluate(&self.values[ft.0], &self.values[fs.0]);
        self.push(out, Op::Correlation { ft, fs, plan })
    }

    /// Mean absolute error over pixels where `target > 0`; `None` when there
    /// are no such pixels.
    pub fn masked_l1(&mut self, pred: NodeId, target: Arc<Vec<f64>>) -> Option<NodeId> {
        let p = self.values[pred.0].data();
        assert_eq!(p.len(), target.len());
        let mut sum = 0.0;
        let mut count = 0;
        for (&x, &t) in p.iter().zip(target.iter()) {
            if t > 0.0 {
                sum += (x - t).abs();
                count += 1;
            }
        }
        if count == 0 {
            return None;
        }
        Some(self.push(Tensor::new(vec![1], vec![sum / count as f64]), Op::MaskedL1 { pred, target, count }))
    }

    /// `sum_i c_i * x_i` over same-shaped nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let shape = self.values[terms[0].0 .0].shape().to_vec();
        let mut data = vec![0.0; shape.iter().product()];
        for &(n, c) in terms {
            assert_eq!(self.values[n.0].shape(), &shape[..]);
            for (d, v) in data.iter_mut().zip(self.values[n.0].data()) {
                *d += c * v;
            }
        }
        self.push(Tensor::new(shape, data), Op::WeightedSum(terms.to_vec()))
    }

    /// Scalar `sum x * coeffs`.
    pub fn dot_const(&mut self, x: NodeId, coeffs: Arc<Vec<f64>>) -> NodeId {
        let v: f64 = self.values[x.0].data().iter().zip(coeffs.iter()).map(|(a, b)| a * b).sum();
        assert_eq!(self.values[x.0].len(), coeffs.len());
        self.push(Tensor::new(vec![1], vec![v]), Op::DotConst { x, coeffs })
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.values[loss.0].len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let val = &self.values[idx];
            match &self.ops[idx] {
                Op::Input => {}
                Op::Param(pid) => {
                    for (d, s) in out.get_mut(*pid).iter_mut().zip(&g) {
                        *d += s;
                    }
                }
                Op::Conv2d { x, w, b, shape } => {
                    let (dx, dw, db) = conv::backward(&g, self.values[x.0].data(), self.values[w.0].data(), shape);
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu(x) => {
                    let xv = self.values[x.0].data();
                    let d = g.iter().zip(xv).map(|(&g, &v)| if v > 0.0 { g } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Tanh(x) => {
                    let d = g.iter().zip(val.data()).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = g.iter().zip(val.data()).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.iter().zip(self.values[b.0].data()).map(|(g, v)| g * v).collect();
                    let db = g.iter().zip(self.values[a.0].data()).map(|(g, v)| g * v).collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::OneMinus(x) => accumulate(&mut grads, *x, g.iter().map(|v| -v).collect()),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.values[p.0].len();
                        accumulate(&mut grads, *p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::ChannelSlice { x, start } => {
                    let (_, h, w) = val.chw();
                    let mut d = vec![0.0; self.values[x.0].len()];
                    let off = start * h * w;
                    d[off..off + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, d);
                }
                Op::ClampMin(x, m) => {
                    let xv = self.values[x.0].data();
                    let d = g.iter().zip(xv).map(|(&g, &v)| if v > *m { g } else { 0.0 }).collect();
                    accumulate(&mut grads, *x, d);
                }
                Op::SparseDelta { depth, sparse } => {
                    let d = g.iter().zip(sparse.iter()).map(|(&g, &s)| if s > 0.0 { -g } else { 0.0 }).collect();
                    accumulate(&mut grads, *depth, d);
                }
                Op::ConvexUpsample { coarse, logits } => {
                    let (_, h, w) = self.values[coarse.0].chw();
                    let (dc, dl) =
                        convex_upsample_backward(self.values[coarse.0].data(), w, h, self.values[logits.0].data(), &g);
                    accumulate(&mut grads, *coarse, dc);
                    accumulate(&mut grads, *logits, dl);
                }
                Op::NearestUp2(x) => {
                    let (c, h, w) = self.values[x.0].chw();
                    let mut d = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                d[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, d);
                }
                Op::Correlation { ft, fs, plan } => {
                    let (dft, dfs) = plan.backward(&self.values[ft.0], &self.values[fs.0], &g);
                    accumulate(&mut grads, *ft, dft);
                    accumulate(&mut grads, *fs, dfs);
                }
                Op::MaskedL1 { pred, target, count } => {
                    let scale = g[0] / *count as f64;
                    let p = self.values[pred.0].data();
                    let d = p
                        .iter()
                        .zip(target.iter())
                        .map(|(&x, &t)| if t > 0.0 { scale * sign(x - t) } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *pred, d);
                }
                Op::WeightedSum(terms) => {
                    for &(n, c) in terms {
                        accumulate(&mut grads, n, g.iter().map(|v| c * v).collect());
                    }
                }
                Op::DotConst { x, coeffs } => {
                    accumulate(&mut grads, *x, coeffs.iter().map(|c| c * g[0]).collect());
                }
            }
        }
        out
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, d: Vec<f64>) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(d),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_check(build: impl Fn(&mut Graph, NodeId) -> NodeId, x0: Vec<f64>, shape: Vec<usize>) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(shape.clone(), x0.clone()));
        let mut g = Graph::new(&store);
        let xn = g.param(id);
        let loss = build(&mut g, xn);
        let grads = g.backward(loss);
        let eps = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += delta;
                let mut g = Graph::new(&s);
                let xn = g.param(id);
                let l = build(&mut g, xn);
                g.value(l).data()[0]
            };
            let num = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let ana = grads.get(id)[i];
            assert!((num - ana).abs() < 1e-6 * num.abs().max(1.0), "index {i}: numeric {num} analytic {ana}");
        }
    }

    fn coeffs(n: usize) -> Arc<Vec<f64>> {
        Arc::new((0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect())
    }

    #[test]
    fn elementwise_ops_have_correct_gradients() {
        let x0: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) * 0.3).collect();
        numeric_check(
            |g, x| {
                let t = g.tanh(x);
                let s = g.sigmoid(x);
                let m = g.mul(t, s);
                let o = g.one_minus(m);
                let a = g.add(o, x);
                let d = g.sub(a, t);
                g.dot_const(d, coeffs(12))
            },
            x0,
            vec![3, 2, 2],
        );
    }

    #[test]
    fn structural_ops_have_correct_gradients() {
        let x0: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
        numeric_check(
            |g, x| {
                let c = g.concat(&[x, x]);
                let s = g.channel_slice(c, 1, 2);
                let u = g.nearest_up2(s);
                let w = g.weighted_sum(&[(u, 0.5), (u, -2.0)]);
                g.dot_const(w, coeffs(32))
            },
            x0,
            vec![2, 2, 2],
        );
    }

    #[test]
    fn masked_l1_and_sparse_delta_gradients() {
        let x0 = vec![1.0, 2.5, 3.0, 0.7];
        numeric_check(
            |g, x| {
                let d = g.sparse_delta(x, Arc::new(vec![1.5, 0.0, 2.0, 0.0]));
                let c = g.clamp_min(x, 0.9);
                let s = g.add(d, c);
                g.masked_l1(s, Arc::new(vec![0.2, 0.0, 9.0, 0.1])).unwrap()
            },
            x0,
            vec![1, 2, 2],
        );
    }

    #[test]
    fn masked_l1_without_valid_pixels_is_none() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(vec![1, 1, 2]));
        assert!(g.masked_l1(x, Arc::new(vec![0.0, -1.0])).is_none());
    }

    #[test]
    fn params_are_cached_per_id() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(vec![1], vec![2.0]));
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let m = g.mul(a, b);
        let grads = g.backward(m);
        assert_eq!(grads.get(id), &[4.0]);
    }
}
