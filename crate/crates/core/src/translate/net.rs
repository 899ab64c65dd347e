//! Encoder-decoder generator and patch discriminator.

use privdistil_nn::{kaiming_uniform, Graph, ParamStore, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use super::TranslateConfig;
use crate::sslcore::Binding;

const NORM_EPS: f64 = 1e-5;
const LEAK: f64 = 0.2;

fn groups_for(c: usize) -> usize {
    [4, 2].into_iter().find(|g| c.is_multiple_of(*g) && c / g >= 2).unwrap_or(1)
}

fn init_conv(rng: &mut ChaCha8Rng, store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, k: usize) {
    store.insert(format!("{name}.w"), kaiming_uniform(rng, &[cout, cin, k, k], cin * k * k));
}

fn init_norm(store: &mut ParamStore<f32>, name: &str, c: usize) {
    store.insert(format!("{name}.gamma"), Tensor::ones([c]));
    store.insert(format!("{name}.beta"), Tensor::zeros([c]));
}

fn conv_norm<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    bind: Binding,
    x: Var,
    name: &str,
    stride: usize,
) -> Var {
    let w = bind.bind(g, store, &format!("{name}.w"));
    let y = g.conv2d(x, w, None, stride, 1);
    let c = g.shape(y)[1];
    let gamma = bind.bind(g, store, &format!("{name}.norm.gamma"));
    let beta = bind.bind(g, store, &format!("{name}.norm.beta"));
    g.group_norm(y, gamma, beta, groups_for(c), T::from_f64_lossy(NORM_EPS))
}

/// Image-to-image generator: a stride-2 encoder, residual bottleneck, and an
/// upsampling decoder with additive skips. Output passes through a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Generator {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub down_stages: usize,
    pub residual_blocks: usize,
}

impl Generator {
    pub fn new(cfg: &TranslateConfig, prefix: &str, in_channels: usize, out_channels: usize) -> Self {
        Self {
            prefix: prefix.to_string(),
            in_channels,
            out_channels,
            width: cfg.width,
            down_stages: cfg.down_stages,
            residual_blocks: cfg.residual_blocks,
        }
    }

    /// Channels at scale `s` (0 is full resolution).
    fn channels(&self, s: usize) -> usize {
        self.width >> (2 - s.min(2))
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    /// The output layer starts at zero, so a fresh generator maps every
    /// input to 0.5.
    pub fn init(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore<f32>) {
        let c0 = self.channels(0);
        init_conv(rng, store, &self.name("stem"), self.in_channels, c0, 3);
        init_norm(store, &self.name("stem.norm"), c0);
        for i in 0..self.down_stages {
            let (a, b) = (self.channels(i), self.channels(i + 1));
            init_conv(rng, store, &self.name(&format!("down{i}")), a, b, 3);
            init_norm(store, &self.name(&format!("down{i}.norm")), b);
        }
        let cb = self.channels(self.down_stages);
        for j in 0..self.residual_blocks {
            for k in 1..=2 {
                let n = self.name(&format!("res{j}.conv{k}"));
                init_conv(rng, store, &n, cb, cb, 3);
                init_norm(store, &format!("{n}.norm"), cb);
            }
        }
        for i in (0..self.down_stages).rev() {
            let (a, b) = (self.channels(i + 1), self.channels(i));
            init_conv(rng, store, &self.name(&format!("up{i}")), a, b, 3);
            init_norm(store, &self.name(&format!("up{i}.norm")), b);
        }
        store.insert(self.name("out.w"), Tensor::zeros([self.out_channels, c0, 1, 1]));
        store.insert(self.name("out.b"), Tensor::zeros([self.out_channels]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Binding, x: Var) -> Var {
        let stem = conv_norm(g, store, bind, x, &self.name("stem"), 1);
        let mut h = g.relu(stem);
        let mut skips = vec![h];
        for i in 0..self.down_stages {
            let y = conv_norm(g, store, bind, h, &self.name(&format!("down{i}")), 2);
            h = g.relu(y);
            skips.push(h);
        }
        skips.pop();
        for j in 0..self.residual_blocks {
            let y = conv_norm(g, store, bind, h, &self.name(&format!("res{j}.conv1")), 1);
            let y = g.relu(y);
            let y = conv_norm(g, store, bind, y, &self.name(&format!("res{j}.conv2")), 1);
            h = g.add(h, y);
        }
        for i in (0..self.down_stages).rev() {
            let u = g.upsample2x(h);
            let y = conv_norm(g, store, bind, u, &self.name(&format!("up{i}")), 1);
            let y = g.relu(y);
            h = g.add(y, skips[i]);
        }
        let w = bind.bind(g, store, &self.name("out.w"));
        let b = bind.bind(g, store, &self.name("out.b"));
        let logits = g.conv2d(h, w, Some(b), 1, 0);
        g.sigmoid(logits)
    }
}

/// Patch classifier: three stride-2 convs then a 1x1 scoring layer, one
/// real/fake score per receptive-field patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub prefix: String,
    pub in_channels: usize,
    pub width: usize,
}

impl Discriminator {
    pub fn new(cfg: &TranslateConfig, prefix: &str, in_channels: usize) -> Self {
        Self { prefix: prefix.to_string(), in_channels, width: cfg.disc_width }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore<f32>) {
        let w = self.width;
        init_conv(rng, store, &self.name("conv0"), self.in_channels, w, 3);
        store.insert(self.name("conv0.b"), Tensor::zeros([w]));
        init_conv(rng, store, &self.name("conv1"), w, 2 * w, 3);
        init_norm(store, &self.name("conv1.norm"), 2 * w);
        init_conv(rng, store, &self.name("conv2"), 2 * w, 2 * w, 3);
        init_norm(store, &self.name("conv2.norm"), 2 * w);
        init_conv(rng, store, &self.name("out"), 2 * w, 1, 1);
        store.insert(self.name("out.b"), Tensor::zeros([1]));
    }

    /// Patch scores `[N, 1, h, w]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Binding, x: Var) -> Var {
        let leak = T::from_f64_lossy(LEAK);
        let w0 = bind.bind(g, store, &self.name("conv0.w"));
        let b0 = bind.bind(g, store, &self.name("conv0.b"));
        let h = g.conv2d(x, w0, Some(b0), 2, 1);
        let mut h = g.leaky_relu(h, leak);
        for name in ["conv1", "conv2"] {
            let y = conv_norm(g, store, bind, h, &self.name(name), 2);
            h = g.leaky_relu(y, leak);
        }
        let w = bind.bind(g, store, &self.name("out.w"));
        let b = bind.bind(g, store, &self.name("out.b"));
        g.conv2d(h, w, Some(b), 1, 0)
    }
}
