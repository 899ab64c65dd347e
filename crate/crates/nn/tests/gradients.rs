use privdistil_nn::gradcheck::check_params;
use privdistil_nn::{uniform, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn store(specs: &[(&str, &[usize])], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in specs {
        s.insert(*name, uniform(&mut rng, shape, 1.0));
    }
    s
}

fn assert_grads(params: ParamStore<f64>, build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var) {
    let mut g = Graph::new();
    let root = build(&mut g, &params);
    let grads = g.backward(root);
    let report = check_params(&params, grads.params(), 1e-5, 1e-8, |p| {
        let mut g = Graph::new();
        let r = build(&mut g, p);
        g.value(r).item()
    });
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

/// Weighted sum so that every output entry gets a distinct cotangent.
fn reduce(g: &mut Graph<f64>, v: Var) -> Var {
    let n = g.value(v).len();
    let shape = g.shape(v).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.731).sin() + 0.3).collect());
    let w = g.input(w);
    let p = g.mul(v, w);
    g.sum_all(p)
}

#[test]
fn elementwise_ops() {
    let p = store(&[("a", &[3, 4]), ("b", &[3, 4])], 1);
    assert_grads(p, |g, s| {
        let a = s.bind(g, "a");
        let b = s.bind(g, "b");
        let x = g.mul(a, b);
        let y = g.sub(x, a);
        let e = g.exp(y);
        let sq = g.square(b);
        let d = g.add_scalar(sq, 1.5);
        let q = g.div(e, d);
        let l = g.add_scalar(q, 2.0);
        let ln = g.log(l);
        let t = g.tanh(ln);
        let sg = g.sigmoid(b);
        let z = g.add(t, sg);
        let ab = g.abs(a);
        let z = g.add(z, ab);
        let r = g.leaky_relu(z, 0.2);
        let sqrt = g.add_scalar(sq, 0.5);
        let sqrt = g.sqrt(sqrt);
        let z = g.add(r, sqrt);
        let z = g.scale(z, 0.7);
        reduce(g, z)
    });
}

#[test]
fn matrix_ops_and_reductions() {
    let p = store(&[("a", &[3, 4]), ("b", &[4, 5]), ("r", &[5]), ("c", &[3])], 2);
    assert_grads(p, |g, s| {
        let a = s.bind(g, "a");
        let b = s.bind(g, "b");
        let m = g.matmul(a, b);
        let r = s.bind(g, "r");
        let rb = g.broadcast_rows(r, 3);
        let m = g.add(m, rb);
        let c = s.bind(g, "c");
        let cb = g.broadcast_cols(c, 5);
        let m = g.mul(m, cb);
        let t = g.transpose(m);
        let rows = g.sum_rows(t);
        let cols = g.sum_cols(t);
        let rs = reduce(g, rows);
        let cs = reduce(g, cols);
        let ls = g.log_softmax_rows(m);
        let picked = g.pick(ls, &[1, 4, 0]);
        let ps = reduce(g, picked);
        let mean = g.mean_all(m);
        let sq = g.square(mean);
        let tot = g.add(rs, cs);
        let tot = g.add(tot, ps);
        g.add(tot, sq)
    });
}

#[test]
fn convolution_with_stride_and_padding() {
    let p = store(&[("x", &[2, 3, 7, 6]), ("w", &[4, 3, 3, 3]), ("b", &[4])], 3);
    assert_grads(p, |g, s| {
        let x = s.bind(g, "x");
        let w = s.bind(g, "w");
        let b = s.bind(g, "b");
        let y = g.conv2d(x, w, Some(b), 2, 1);
        assert_eq!(g.shape(y), &[2, 4, 4, 3]);
        reduce(g, y)
    });
}

#[test]
fn spatial_and_normalization_ops() {
    let p = store(&[("x", &[2, 4, 3, 3]), ("gamma", &[4]), ("beta", &[4]), ("v", &[5, 3]), ("bg", &[3]), ("bb", &[3])], 4);
    assert_grads(p, |g, s| {
        let x = s.bind(g, "x");
        let gm = s.bind(g, "gamma");
        let bt = s.bind(g, "beta");
        let n = g.group_norm(x, gm, bt, 2, 1e-5);
        let u = g.upsample2x(n);
        let pooled = g.global_avg_pool(u);
        let a = reduce(g, u);
        let b = reduce(g, pooled);
        let v = s.bind(g, "v");
        let bg = s.bind(g, "bg");
        let bb = s.bind(g, "bb");
        let bn = g.batch_norm(v, bg, bb, 1e-5);
        let c = reduce(g, bn);
        let t = g.add(a, b);
        g.add(t, c)
    });
}

#[test]
fn slicing_concat_reshape_and_shared_params() {
    let p = store(&[("a", &[4, 3]), ("w", &[3, 2])], 5);
    assert_grads(p, |g, s| {
        let a = s.bind(g, "a");
        let top = g.slice_rows(a, 0, 2);
        let bottom = g.slice_rows(a, 2, 2);
        // the same parameter bound twice
        let w1 = s.bind(g, "w");
        let w2 = s.bind(g, "w");
        let y1 = g.matmul(top, w1);
        let y2 = g.matmul(bottom, w2);
        let cat = g.concat_rows(&[y1, y2]);
        let r = g.reshape(cat, [8]);
        let r = g.relu(r);
        reduce(g, r)
    });
}

#[test]
fn guided_relu_blocks_negative_gradients() {
    let mut g = Graph::<f64>::new().with_guided_relu(true);
    let x = g.leaf(Tensor::new([4], vec![1.0, -1.0, 2.0, 3.0]));
    let r = g.relu(x);
    let w = g.input(Tensor::new([4], vec![1.0, 1.0, -1.0, 2.0]));
    let p = g.mul(r, w);
    let s = g.sum_all(p);
    let grads = g.backward(s);
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.input(Tensor::new([2], vec![1.0, 2.0]));
    let l = g.leaf(Tensor::new([2], vec![3.0, 4.0]));
    let p = g.mul(c, l);
    let s = g.sum_all(p);
    let grads = g.backward(s);
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(l).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn channel_concat() {
    let p = store(&[("a", &[2, 1, 2, 3]), ("b", &[2, 3, 2, 3])], 9);
    assert_grads(p, |g, s| {
        let a = s.bind(g, "a");
        let b = s.bind(g, "b");
        let c = g.concat_channels(&[a, b, a]);
        reduce(g, c)
    });
}

#[test]
fn channel_concat_layout() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::new([2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]));
    let b = g.input(Tensor::new([2, 1, 1, 2], vec![5.0, 6.0, 7.0, 8.0]));
    let c = g.concat_channels(&[a, b]);
    assert_eq!(g.shape(c), &[2, 2, 1, 2]);
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
}
