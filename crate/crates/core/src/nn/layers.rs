use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamId, ParamStore, Tensor};

/// Deterministic parameter initialisation.
pub struct Initializer {
    rng: ChaCha8Rng,
    gain: f64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), gain: 1.0 }
    }

    /// Every weight zero.
    pub fn zeros() -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(0), gain: 0.0 }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.gain = gain;
        self
    }

    /// Uniform in `[-b, b]` with `b = gain * sqrt(3 / fan_in)`.
    pub fn weight(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let n: usize = shape.iter().product();
        if self.gain == 0.0 {
            return Tensor::zeros(shape);
        }
        let bound = self.gain * (3.0 / fan_in as f64).sqrt();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        Tensor::new(shape, data)
    }
}

/// Same-padded (odd kernels) or stride-2 convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        stride: usize,
        init: &mut Initializer,
    ) -> Self {
        let fan_in = in_ch * kernel.0 * kernel.1;
        let weight = store.add(format!("{name}.weight"), init.weight(vec![out_ch, in_ch, kernel.0, kernel.1], fan_in));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        Self { weight, bias, in_ch, out_ch, kernel, stride }
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> NodeId {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.conv2d(x, w, b, self.stride, ((self.kernel.0 - 1) / 2, (self.kernel.1 - 1) / 2))
    }
}

/// Convolutional GRU cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGru {
    pub convz: Conv2d,
    pub convr: Conv2d,
    pub convq: Conv2d,
    pub hidden: usize,
    pub input: usize,
}

impl ConvGru {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        input: usize,
        kernel: (usize, usize),
        init: &mut Initializer,
    ) -> Self {
        let c = hidden + input;
        Self {
            convz: Conv2d::new(store, &format!("{name}.convz"), c, hidden, kernel, 1, init),
            convr: Conv2d::new(store, &format!("{name}.convr"), c, hidden, kernel, 1, init),
            convq: Conv2d::new(store, &format!("{name}.convq"), c, hidden, kernel, 1, init),
            hidden,
            input,
        }
    }

    pub fn forward(&self, g: &mut Graph, h: NodeId, x: Option<NodeId>) -> NodeId {
        let hx = match x {
            Some(x) => g.concat(&[h, x]),
            None => h,
        };
        let z = self.convz.forward(g, hx);
        let z = g.sigmoid(z);
        let r = self.convr.forward(g, hx);
        let r = g.sigmoid(r);
        let rh = g.mul(r, h);
        let rhx = match x {
            Some(x) => g.concat(&[rh, x]),
            None => rh,
        };
        let q = self.convq.forward(g, rhx);
        let q = g.tanh(q);
        let keep = g.one_minus(z);
        let a = g.mul(keep, h);
        let b = g.mul(z, q);
        g.add(a, b)
    }
}
