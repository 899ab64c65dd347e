//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is added, and [`Graph::backward`] walks the tape in reverse. Graphs are
//! cheap to build and are thrown away after each step.

use std::collections::BTreeMap;

use crate::conv::{self, ConvGeometry};
use crate::{Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Abs(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SumCols(Var),
    Reshape(Var),
    LogSoftmaxRows(Var),
    Pick(Var, Vec<usize>),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, out_channels: usize, cols: Vec<T> },
    GlobalAvgPool(Var),
    Upsample2x(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatChannels(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Recorded computation.
#[derive(Debug, Clone)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    guided_relu: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), guided_relu: false }
    }

    /// Rectifier backward passes only positive gradients through positive
    /// activations (guided backpropagation).
    pub fn with_guided_relu(mut self, guided: bool) -> Self {
        self.guided_relu = guided;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Input whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, param: None });
        Var(self.nodes.len() - 1)
    }

    /// Named trainable parameter. Binding the same name twice shares it; the
    /// gradients are summed in [`Gradients::params`].
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true, param: Some(name.to_string()) });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x / y);
        self.push(v, Op::Div(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// `[M]` -> `[N, M]`, repeating the vector on every row.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rank(), 1, "broadcast_rows expects rank 1");
        let m = src.len();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        self.push(Tensor::new([n, m], data), Op::BroadcastRows(a), &[a])
    }

    /// `[N]` -> `[N, M]`, repeating each entry along its row.
    pub fn broadcast_cols(&mut self, a: Var, m: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rank(), 1, "broadcast_cols expects rank 1");
        let n = src.len();
        let mut data = Vec::with_capacity(n * m);
        for &x in src.data() {
            data.extend(std::iter::repeat_n(x, m));
        }
        self.push(Tensor::new([n, m], data), Op::BroadcastCols(a), &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose2();
        self.push(v, Op::Transpose(a), &[a])
    }

    /// `x W + b` for `x: [N, I]`, `w: [I, O]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => {
                let n = self.shape(y)[0];
                let bb = self.broadcast_rows(b, n);
                self.add(y, bb)
            }
            None => y,
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push(v, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.ln());
        self.push(v, Op::Log(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.sqrt());
        self.push(v, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::from_usize(t.len()).unwrap());
        self.push(v, Op::MeanAll(a), &[a])
    }

    /// `[N, M]` -> `[N]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims2();
        let data = (0..n).map(|i| t.data()[i * m..(i + 1) * m].iter().copied().sum()).collect();
        self.push(Tensor::new([n], data), Op::SumRows(a), &[a])
    }

    /// `[N, M]` -> `[M]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims2();
        let mut data = vec![T::zero(); m];
        for i in 0..n {
            for (acc, &x) in data.iter_mut().zip(&t.data()[i * m..(i + 1) * m]) {
                *acc = *acc + x;
            }
        }
        self.push(Tensor::new([m], data), Op::SumCols(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Var {
        let v = self.value(a).clone().reshape(shape);
        self.push(v, Op::Reshape(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims2();
        let mut out = vec![T::zero(); n * m];
        for i in 0..n {
            let row = &t.data()[i * m..(i + 1) * m];
            let mx = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
            let lse = mx + row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln();
            for (o, &x) in out[i * m..(i + 1) * m].iter_mut().zip(row) {
                *o = x - lse;
            }
        }
        self.push(Tensor::new([n, m], out), Op::LogSoftmaxRows(a), &[a])
    }

    /// `[N, M]` -> `[N]`, taking column `indices[i]` from row `i`.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Var {
        let t = self.value(a);
        let (n, m) = t.dims2();
        assert_eq!(indices.len(), n, "pick index count");
        let data = indices
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < m, "pick index {j} out of range {m}");
                t.data()[i * m + j]
            })
            .collect();
        self.push(Tensor::new([n], data), Op::Pick(a, indices.to_vec()), &[a])
    }

    /// 2-D convolution of `x: [N, C, H, W]` with `w: [O, C, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Var {
        let (n, c, h, wd) = self.value(x).dims4();
        let (o, c2, k, k2) = self.value(w).dims4();
        assert_eq!(c, c2, "conv2d channel mismatch: input {c}, weight {c2}");
        assert_eq!(k, k2, "conv2d expects square kernels");
        assert!(h + 2 * padding >= k && wd + 2 * padding >= k, "conv2d kernel larger than padded input");
        let geom = ConvGeometry { batch: n, in_channels: c, height: h, width: wd, kernel: k, stride, padding };
        let cols = conv::im2col(self.value(x).data(), &geom);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); o * ncols];
        let wdata = self.value(w).data();
        T::gemm(o, rows, ncols, T::one(), wdata, rows as isize, 1, &cols, ncols as isize, 1, T::zero(), &mut out, ncols as isize, 1);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let plane = ho * wo;
        let mut y = conv::channel_major_to_batch_major(&out, n, o, plane);
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), o, "conv2d bias length");
            for bn in 0..n {
                for (oc, &bv) in bias.iter().enumerate() {
                    for v in &mut y[(bn * o + oc) * plane..][..plane] {
                        *v = *v + bv;
                    }
                }
            }
        }
        let value = Tensor::new([n, o, ho, wo], y);
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(value, Op::Conv2d { x, w, b, geom, out_channels: o, cols }, &parents)
    }

    /// `[N, C, H, W]` -> `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let denom = T::from_usize(h * w).unwrap();
        let data = t.data().chunks(h * w).map(|p| p.iter().copied().sum::<T>() / denom).collect();
        self.push(Tensor::new([n, c], data), Op::GlobalAvgPool(x), &[x])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * h2 * w2];
        for (p, plane) in t.data().chunks(h * w).enumerate() {
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = plane[(i / 2) * w + j / 2];
                }
            }
        }
        self.push(Tensor::new([n, c, h2, w2], out), Op::Upsample2x(x), &[x])
    }

    /// Group normalization over `[N, C, H, W]` with a per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: T) -> Var {
        let t = self.value(x);
        let (n, c, h, w) = t.dims4();
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        assert_eq!(gm.len(), c);
        assert_eq!(bt.len(), c);
        let per_group = c / groups * h * w;
        let plane = h * w;
        let m = T::from_usize(per_group).unwrap();
        let mut xhat = vec![T::zero(); t.len()];
        let mut inv_std = vec![T::zero(); n * groups];
        let mut out = vec![T::zero(); t.len()];
        for (gi, chunk) in t.data().chunks(per_group).enumerate() {
            let mean = chunk.iter().copied().sum::<T>() / m;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let is = T::one() / (var + eps).sqrt();
            inv_std[gi] = is;
            let base = gi * per_group;
            let c0 = (gi % groups) * (c / groups);
            for (k, &v) in chunk.iter().enumerate() {
                let xh = (v - mean) * is;
                let ch = c0 + k / plane;
                xhat[base + k] = xh;
                out[base + k] = xh * gm[ch] + bt[ch];
            }
        }
        let _ = n;
        let value = Tensor::new(t.shape().to_vec(), out);
        self.push(value, Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Batch normalization of `[N, F]` using the statistics of this batch.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let t = self.value(x);
        let (n, f) = t.dims2();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let nn = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); n * f];
        let mut inv_std = vec![T::zero(); f];
        let mut out = vec![T::zero(); n * f];
        let d = t.data();
        for j in 0..f {
            let mean = (0..n).map(|i| d[i * f + j]).sum::<T>() / nn;
            let var = (0..n).map(|i| (d[i * f + j] - mean) * (d[i * f + j] - mean)).sum::<T>() / nn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[j] = is;
            for i in 0..n {
                let xh = (d[i * f + j] - mean) * is;
                xhat[i * f + j] = xh;
                out[i * f + j] = xh * gm[j] + bt[j];
            }
        }
        self.push(Tensor::new([n, f], out), Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta])
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        let idx: Vec<usize> = (start..start + len).collect();
        let v = t.select(&idx);
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    /// Concatenation along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&tensors);
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Joins `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_channels of zero tensors");
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat_channels shape mismatch");
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        self.push(Tensor::new([n, total, h, w], data), Op::ConcatChannels(parts.to_vec()), parts)
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let seed = self.value(root);
        assert_eq!(seed.len(), 1, "backward root must be a single element, got {:?}", seed.shape());
        self.backward_with(root, Tensor::new(seed.shape().to_vec(), vec![T::one()]))
    }

    /// Reverse pass with an explicit output cotangent.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                grads[idx] = None;
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut params: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(name), Some(g)) = (&node.param, g) {
                match params.get_mut(name) {
                    Some(acc) => acc.add_assign(g),
                    None => {
                        params.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        Gradients { nodes: grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "gradient shape for node {}", v.0);
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(bv, |gv, d| gv / d));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -y / b
                    let t = g.zip_map(y, |gv, yv| gv * yv);
                    self.accumulate(grads, *b, t.zip_map(bv, |tv, d| -tv / d));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::BroadcastRows(a) => {
                let (n, m) = g.dims2();
                let mut acc = vec![T::zero(); m];
                for i in 0..n {
                    for (s, &v) in acc.iter_mut().zip(&g.data()[i * m..(i + 1) * m]) {
                        *s = *s + v;
                    }
                }
                self.accumulate(grads, *a, Tensor::new([m], acc));
            }
            Op::BroadcastCols(a) => {
                let (n, m) = g.dims2();
                let acc = (0..n).map(|i| g.data()[i * m..(i + 1) * m].iter().copied().sum()).collect();
                self.accumulate(grads, *a, Tensor::new([n], acc));
            }
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k) = av.dims2();
                let m = bv.dims2().1;
                if self.needs(*a) {
                    // g [n,m] x b^T [m,k]
                    let mut ga = vec![T::zero(); n * k];
                    T::gemm(n, m, k, T::one(), g.data(), m as isize, 1, bv.data(), 1, m as isize, T::zero(), &mut ga, k as isize, 1);
                    self.accumulate(grads, *a, Tensor::new([n, k], ga));
                }
                if self.needs(*b) {
                    // a^T [k,n] x g [n,m]
                    let mut gb = vec![T::zero(); k * m];
                    T::gemm(k, n, m, T::one(), av.data(), 1, k as isize, g.data(), m as isize, 1, T::zero(), &mut gb, m as isize, 1);
                    self.accumulate(grads, *b, Tensor::new([k, m], gb));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose2()),
            Op::Relu(a) => {
                let x = self.value(*a);
                let guided = self.guided_relu;
                let z = T::zero();
                let ga = g.zip_map(x, |gv, xv| if xv > z && (!guided || gv > z) { gv } else { z });
                self.accumulate(grads, *a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                let ga = g.zip_map(self.value(*a), |gv, xv| if xv > T::zero() { gv } else { gv * s });
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * (T::one() - yv * yv))),
            Op::Sigmoid(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv * (T::one() - yv))),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * yv)),
            Op::Log(a) => self.accumulate(grads, *a, g.zip_map(self.value(*a), |gv, xv| gv / xv)),
            Op::Sqrt(a) => {
                let half = T::from_f64_lossy(0.5);
                self.accumulate(grads, *a, g.zip_map(y, |gv, yv| gv * half / yv))
            }
            Op::Square(a) => {
                let two = T::from_f64_lossy(2.0);
                self.accumulate(grads, *a, g.zip_map(self.value(*a), |gv, xv| gv * two * xv))
            }
            Op::Abs(a) => {
                let ga = g.zip_map(self.value(*a), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.accumulate(grads, *a, ga)
            }
            Op::SumAll(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, Tensor::full(shape, g.item()));
            }
            Op::MeanAll(a) => {
                let shape = self.shape(*a).to_vec();
                let n = T::from_usize(self.value(*a).len()).unwrap();
                self.accumulate(grads, *a, Tensor::full(shape, g.item() / n));
            }
            Op::SumRows(a) => {
                let (n, m) = self.value(*a).dims2();
                let mut data = Vec::with_capacity(n * m);
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv, m));
                }
                self.accumulate(grads, *a, Tensor::new([n, m], data));
            }
            Op::SumCols(a) => {
                let (n, m) = self.value(*a).dims2();
                let mut data = Vec::with_capacity(n * m);
                for _ in 0..n {
                    data.extend_from_slice(g.data());
                }
                self.accumulate(grads, *a, Tensor::new([n, m], data));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(shape));
            }
            Op::LogSoftmaxRows(a) => {
                let (n, m) = y.dims2();
                let mut ga = vec![T::zero(); n * m];
                for i in 0..n {
                    let gr = &g.data()[i * m..(i + 1) * m];
                    let yr = &y.data()[i * m..(i + 1) * m];
                    let gs: T = gr.iter().copied().sum();
                    for j in 0..m {
                        ga[i * m + j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                self.accumulate(grads, *a, Tensor::new([n, m], ga));
            }
            Op::Pick(a, indices) => {
                let (n, m) = self.value(*a).dims2();
                let mut ga = vec![T::zero(); n * m];
                for (i, &j) in indices.iter().enumerate() {
                    ga[i * m + j] = g.data()[i];
                }
                self.accumulate(grads, *a, Tensor::new([n, m], ga));
            }
            Op::Conv2d { x, w, b, geom, out_channels, cols } => {
                let o = *out_channels;
                let plane = geom.out_height() * geom.out_width();
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let gm = conv::batch_major_to_channel_major(g.data(), geom.batch, o, plane);
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = (0..o).map(|oc| gm[oc * ncols..(oc + 1) * ncols].iter().copied().sum()).collect();
                        self.accumulate(grads, *b, Tensor::new([o], gb));
                    }
                }
                if self.needs(*w) {
                    // gm [o, ncols] x cols^T [ncols, rows]
                    let mut gw = vec![T::zero(); o * rows];
                    T::gemm(o, ncols, rows, T::one(), &gm, ncols as isize, 1, cols, 1, ncols as isize, T::zero(), &mut gw, rows as isize, 1);
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w).to_vec(), gw));
                }
                if self.needs(*x) {
                    // w^T [rows, o] x gm [o, ncols]
                    let wv = self.value(*w).data();
                    let mut gc = vec![T::zero(); rows * ncols];
                    T::gemm(rows, o, ncols, T::one(), wv, 1, rows as isize, &gm, ncols as isize, 1, T::zero(), &mut gc, ncols as isize, 1);
                    let gx = conv::col2im(&gc, geom);
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx));
                }
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let denom = T::from_usize(h * w).unwrap();
                let mut gx = Vec::with_capacity(n * c * h * w);
                for &gv in g.data() {
                    gx.extend(std::iter::repeat_n(gv / denom, h * w));
                }
                self.accumulate(grads, *x, Tensor::new([n, c, h, w], gx));
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let w2 = 2 * w;
                let mut gx = vec![T::zero(); n * c * h * w];
                for (p, plane) in g.data().chunks(4 * h * w).enumerate() {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (i, line) in plane.chunks(w2).enumerate() {
                        for (j, &v) in line.iter().enumerate() {
                            let d = &mut dst[(i / 2) * w + j / 2];
                            *d = *d + v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([n, c, h, w], gx));
            }
            Op::GroupNorm { x, gamma, beta, groups, xhat, inv_std } => {
                let (_, c, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let cpg = c / groups;
                let per_group = cpg * plane;
                let m = T::from_usize(per_group).unwrap();
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); g.len()];
                for (gi, gch) in g.data().chunks(per_group).enumerate() {
                    let base = gi * per_group;
                    let c0 = (gi % groups) * cpg;
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for (k, &gv) in gch.iter().enumerate() {
                        let ch = c0 + k / plane;
                        let xh = xhat[base + k];
                        dgamma[ch] = dgamma[ch] + gv * xh;
                        dbeta[ch] = dbeta[ch] + gv;
                        let d = gv * gm[ch];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xh;
                    }
                    let is = inv_std[gi];
                    for (k, &gv) in gch.iter().enumerate() {
                        let ch = c0 + k / plane;
                        let d = gv * gm[ch];
                        dx[base + k] = is / m * (m * d - sum_d - xhat[base + k] * sum_dx);
                    }
                }
                self.accumulate(grads, *gamma, Tensor::new([c], dgamma));
                self.accumulate(grads, *beta, Tensor::new([c], dbeta));
                if self.needs(*x) {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), dx));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, f) = g.dims2();
                let nn = T::from_usize(n).unwrap();
                let gm = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![T::zero(); f];
                let mut dbeta = vec![T::zero(); f];
                let mut dx = vec![T::zero(); n * f];
                for j in 0..f {
                    let mut sum_d = T::zero();
                    let mut sum_dx = T::zero();
                    for i in 0..n {
                        let gv = gd[i * f + j];
                        let xh = xhat[i * f + j];
                        dgamma[j] = dgamma[j] + gv * xh;
                        dbeta[j] = dbeta[j] + gv;
                        let d = gv * gm[j];
                        sum_d = sum_d + d;
                        sum_dx = sum_dx + d * xh;
                    }
                    for i in 0..n {
                        let d = gd[i * f + j] * gm[j];
                        dx[i * f + j] = inv_std[j] / nn * (nn * d - sum_d - xhat[i * f + j] * sum_dx);
                    }
                }
                self.accumulate(grads, *gamma, Tensor::new([f], dgamma));
                self.accumulate(grads, *beta, Tensor::new([f], dbeta));
                if self.needs(*x) {
                    self.accumulate(grads, *x, Tensor::new([n, f], dx));
                }
            }
            Op::SliceRows(a, start) => {
                let src_shape = self.shape(*a).to_vec();
                let inner: usize = src_shape[1..].iter().product();
                let mut ga = vec![T::zero(); src_shape.iter().product()];
                ga[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *a, Tensor::new(src_shape, ga));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        let shape = self.shape(p).to_vec();
                        self.accumulate(grads, p, Tensor::new(shape, g.data()[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::ConcatChannels(parts) => {
                let (n, total, h, w) = g.dims4();
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for b in 0..n {
                            let start = (b * total + offset) * plane;
                            d.extend_from_slice(&g.data()[start..start + c * plane]);
                        }
                        self.accumulate(grads, p, Tensor::new([n, c, h, w], d));
                    }
                    offset += c;
                }
            }
        }
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any recorded node, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients, summed over every binding of a name.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}
