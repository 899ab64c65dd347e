use privdistil_nn::gradcheck::check_params;
use privdistil_nn::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn tiny_encoder(channels: usize) -> EncoderConfig {
    EncoderConfig {
        preset: EncoderPreset::SmallCnn,
        in_channels: channels,
        image_size: 16,
        stage_widths: vec![4, 8],
        blocks_per_stage: vec![1, 1],
        embed_dim: 8,
    }
}

fn tiny_projector() -> ProjectorConfig {
    ProjectorConfig { layers: 2, width: 8, batch_norm: true }
}

fn images(n: usize, c: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new([n, c, 16, 16], (0..n * c * 256).map(|_| rng.random::<f64>()).collect())
}

fn tiny_model(privileged: bool) -> (SslModel, ParamStore<f64>) {
    let model = SslModel::new(tiny_encoder(3), privileged.then(|| tiny_encoder(1)), tiny_projector()).unwrap();
    let store = model.init(3).cast::<f64>();
    (model, store)
}

/// Rows `[s, s], [s, -s], [-s, s], [-s, -s]`: zero covariance, std above 1.
fn spread_batch() -> Tensor<f64> {
    Tensor::new([4, 2], vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0])
}

fn embed_pair(kind: &LossKind, a: Tensor<f64>, b: Tensor<f64>) -> crate::Result<LossBreakdown> {
    let ea = EmbeddingBatch::new(a, "a")?;
    let eb = EmbeddingBatch::new(b, "b")?;
    match kind {
        LossKind::Vicreg { .. } => vicreg_loss(&ea, &eb, kind),
        LossKind::Infonce { .. } => infonce_loss(&ea, &eb, kind),
    }
}

#[test]
fn config_invariants() {
    assert!(EncoderConfig { embed_dim: 4, ..tiny_encoder(3) }.validate().is_err());
    assert!(EncoderConfig { embed_dim: 512, ..EncoderConfig::resnet50(3, 64) }.validate().is_err());
    assert!(EncoderConfig::resnet50(3, 64).validate().is_ok());
    assert!(EncoderConfig::small_cnn(3, 64).validate().is_ok());
    assert!(ProjectorConfig { layers: 0, ..ProjectorConfig::default() }.validate(128).is_err());
    assert!(ProjectorConfig { width: 16, ..ProjectorConfig::default() }.validate(128).is_err());
    assert!(ProjectorConfig { width: 32, ..ProjectorConfig::default() }.validate(128).is_ok());
    assert!(LossKind::Infonce { temperature: 0.0 }.validate().is_err());
    assert!(LossKind::Vicreg { inv_weight: -1.0, var_weight: 1.0, cov_weight: 1.0, gamma: 1.0, eps: 1e-4 }.validate().is_err());
}

#[test]
fn loss_kind_serde_round_trip() {
    for k in [LossKind::vicreg(), LossKind::infonce()] {
        let s = serde_json::to_string(&k).unwrap();
        assert_eq!(serde_json::from_str::<LossKind>(&s).unwrap(), k);
    }
    assert!(serde_json::from_str::<LossKind>(r#"{"kind":"infonce","temperature":0.1,"extra":1}"#).is_err());
}

#[test]
fn zero_final_layer_gives_zero_representations() {
    let enc = Encoder::new(tiny_encoder(3), "e").unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut ChaCha8Rng::seed_from_u64(1), &mut store);
    let store = store.cast::<f64>();
    let mut zeroed = store.clone();
    zeroed.get_mut("e.fc.w").unwrap().data_mut().fill(0.0);
    let reps = enc.encode(&zeroed, &images(3, 3, 0)).unwrap();
    assert_eq!(reps.shape(), &[3, 8]);
    assert!(reps.data().iter().all(|&v| v == 0.0));
}

#[test]
fn encode_copies_and_permutations() {
    let enc = Encoder::new(tiny_encoder(3), "e").unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut ChaCha8Rng::seed_from_u64(1), &mut store);
    let one = images(1, 3, 5);
    let copies = Tensor::stack(&[one.clone(), one.clone(), one.clone()]);
    let copies = copies.reshape([3, 3, 16, 16]);
    let reps = enc.encode(&store.cast::<f64>(), &copies).unwrap();
    assert_eq!(reps.row(0), reps.row(1));
    assert_eq!(reps.row(0), reps.row(2));

    let batch = images(4, 3, 6);
    let perm = [2usize, 0, 3, 1];
    let base = enc.encode(&store.cast::<f64>(), &batch).unwrap();
    let again = enc.encode(&store.cast::<f64>(), &batch).unwrap();
    assert_eq!(base, again);
    let permuted = enc.encode(&store.cast::<f64>(), &batch.select(&perm)).unwrap();
    assert_eq!(permuted, base.select(&perm));
}

#[test]
fn encode_rejects_wrong_size() {
    let enc = Encoder::new(tiny_encoder(3), "e").unwrap();
    let mut store = ParamStore::new();
    enc.init(&mut ChaCha8Rng::seed_from_u64(1), &mut store);
    assert!(matches!(enc.encode(&store, &Tensor::zeros([2, 3, 32, 32])), Err(Error::Shape(_))));
    assert!(matches!(enc.encode(&store, &Tensor::zeros([2, 1, 16, 16])), Err(Error::Shape(_))));
}

#[test]
fn identity_projector_is_identity() {
    let proj = Projector::new(ProjectorConfig { layers: 1, width: 6, batch_norm: true }, 6, "p").unwrap();
    let mut store = ParamStore::<f64>::new();
    store.insert("p.l0.w", Tensor::eye(6));
    store.insert("p.l0.b", Tensor::zeros([6]));
    let reps = Tensor::new([3, 6], (0..18).map(|i| i as f64 * 0.3 - 2.0).collect());
    assert_eq!(proj.project(&store, &reps).unwrap(), reps);
}

#[test]
fn projector_keeps_identical_rows_identical() {
    let proj = Projector::new(tiny_projector(), 8, "p").unwrap();
    let mut store = ParamStore::new();
    proj.init(&mut ChaCha8Rng::seed_from_u64(2), &mut store);
    let mut data: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
    data.copy_within(0..8, 8);
    let out = proj.project(&store.cast::<f64>(), &Tensor::new([3, 8], data)).unwrap();
    assert_eq!(out.row(0), out.row(1));
    assert_ne!(out.row(0), out.row(2));
}

#[test]
fn projector_gradients_match_finite_differences() {
    let proj = Projector::new(tiny_projector(), 8, "p").unwrap();
    let mut store = ParamStore::new();
    proj.init(&mut ChaCha8Rng::seed_from_u64(2), &mut store);
    let store = store.cast::<f64>();
    let reps = Tensor::new([5, 8], (0..40).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect());
    let loss = |s: &ParamStore<f64>| -> (f64, Option<Gradients>) {
        let mut g = Graph::new();
        let x = g.input(reps.clone());
        let y = proj.forward(&mut g, s, Binding::Trainable, x);
        // A plain output sum is constant under batch norm; weight it.
        let w = g.input(Tensor::new([5, 8], (0..40).map(|i| (i as f64 * 0.37).cos()).collect()));
        let prod = g.mul(y, w);
        let root = g.sum_all(prod);
        (g.value(root).item(), Some(g.backward(root)))
    };
    let (_, grads) = loss(&store);
    let report = check_params(&store, grads.unwrap().params(), 1e-5, 1e-6, |s| loss(s).0);
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

type Gradients = privdistil_nn::Gradients<f64>;

#[test]
fn vicreg_vanishes_on_spread_identical_batches() {
    let z = spread_batch();
    let br = embed_pair(&LossKind::vicreg(), z.clone(), z).unwrap();
    assert_eq!(br.total, 0.0);
}

#[test]
fn vicreg_zero_variance_saturates_hinge() {
    let k = LossKind::Vicreg { inv_weight: 25.0, var_weight: 25.0, cov_weight: 1.0, gamma: 1.0, eps: 0.0 };
    let z = Tensor::zeros([2, 1]);
    let br = embed_pair(&k, z.clone(), z).unwrap();
    assert_eq!(
        br.pairs[0].components,
        LossComponents::Vicreg { invariance: 0.0, variance: 1.0, covariance: 0.0 }
    );
}

#[test]
fn losses_reject_bad_shapes() {
    for k in [LossKind::vicreg(), LossKind::infonce()] {
        assert!(matches!(embed_pair(&k, Tensor::ones([1, 3]), Tensor::ones([1, 3])), Err(Error::Shape(_))));
        assert!(matches!(embed_pair(&k, Tensor::ones([3, 3]), Tensor::ones([3, 2])), Err(Error::Shape(_))));
    }
    assert!(EmbeddingBatch::new(Tensor::from_f64([2, 1], &[f64::NAN, 0.0]), "x").is_err());
    assert!(vicreg_loss(
        &EmbeddingBatch::new(spread_batch(), "a").unwrap(),
        &EmbeddingBatch::new(spread_batch(), "b").unwrap(),
        &LossKind::infonce()
    )
    .is_err());
}

#[test]
fn infonce_hand_case() {
    let k = LossKind::Infonce { temperature: 1.0 };
    let br = embed_pair(&k, Tensor::eye(2), Tensor::eye(2)).unwrap();
    let expect = (1.0 + (-1.0f64).exp()).ln();
    assert!((br.total - expect).abs() < 1e-12);
    assert!((br.total - 0.3133).abs() < 1e-4);
    let scaled = embed_pair(&k, Tensor::eye(2).map(|v| v * 5.0), Tensor::eye(2).map(|v| v * 5.0)).unwrap();
    assert!((scaled.total - br.total).abs() < 1e-12);
}

#[test]
fn infonce_rejects_zero_rows() {
    let z = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, 0.0]);
    assert!(matches!(embed_pair(&LossKind::infonce(), z.clone(), z), Err(Error::Degenerate(_))));
}

fn siamese_total(
    model: &SslModel,
    store: &ParamStore<f64>,
    a: &Tensor<f64>,
    b: &Tensor<f64>,
    mode: SiameseMode,
    k: &LossKind,
) -> LossBreakdown {
    let mut g = Graph::new();
    siamese_objective(&mut g, store, model, a, b, mode, k, Binding::Trainable).unwrap().breakdown
}

#[test]
fn siamese_identical_inputs_have_zero_invariance() {
    let (model, store) = tiny_model(false);
    let x = images(6, 3, 1);
    let br = siamese_total(&model, &store, &x, &x, SiameseMode::Unprivileged, &LossKind::vicreg());
    assert_eq!(br.pairs.len(), 1);
    match br.pairs[0].components {
        LossComponents::Vicreg { invariance, .. } => assert_eq!(invariance, 0.0),
        other => panic!("{other:?}"),
    }
}

#[test]
fn privileged_siamese_with_mirrored_branch_equals_unprivileged() {
    let model = SslModel::new(tiny_encoder(3), Some(tiny_encoder(3)), tiny_projector()).unwrap();
    let mut store = model.init(4).cast::<f64>();
    let mirrored: Vec<(String, Tensor<f64>)> = store
        .subset("primary.")
        .iter()
        .map(|(k, v)| (k.replacen("primary.", "priv.", 1), v.clone()))
        .collect();
    for (k, v) in mirrored {
        store.insert(k, v);
    }
    let a = images(4, 3, 2);
    let b = images(4, 3, 3);
    for k in [LossKind::vicreg(), LossKind::infonce()] {
        let un = siamese_total(&model, &store, &a, &b, SiameseMode::Unprivileged, &k);
        let pr = siamese_total(&model, &store, &a, &b, SiameseMode::Privileged, &k);
        assert_eq!(un.total, pr.total);
    }
}

#[test]
fn objective_errors() {
    let (model, store) = tiny_model(true);
    let (unpriv_model, _) = tiny_model(false);
    let k = LossKind::vicreg();
    let mut g = Graph::new();
    let a = images(4, 3, 0);
    let short = images(3, 3, 0);
    let p = images(4, 1, 0);
    assert!(matches!(
        siamese_objective(&mut g, &store, &model, &a, &short, SiameseMode::Unprivileged, &k, Binding::Trainable),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        trident_objective(&mut g, &store, &model, &a, &a, None, &k, Binding::Trainable),
        Err(Error::Incompatible(_))
    ));
    assert!(matches!(
        trident_objective(&mut g, &store, &model, &a, &a, Some(&images(3, 1, 0)), &k, Binding::Trainable),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        trident_objective(&mut g, &store, &unpriv_model, &a, &a, Some(&p), &k, Binding::Trainable),
        Err(Error::Incompatible(_))
    ));
    assert!(trident_objective(&mut g, &store, &model, &a, &a, Some(&p), &k, Binding::Trainable).is_ok());
}

fn pair_total(model: &SslModel, store: &ParamStore<f64>, x: &Tensor<f64>, y: &Tensor<f64>, py: bool, k: &LossKind) -> f64 {
    let mut g = Graph::new();
    let xa = g.input(x.clone());
    let xb = g.input(y.clone());
    let za = model.primary.embed(&mut g, store, Binding::Frozen, xa);
    let branch = if py { model.privileged.as_ref().unwrap() } else { &model.primary };
    let zb = branch.embed(&mut g, store, Binding::Frozen, xb);
    pair_loss(&mut g, za, zb, k, "x").unwrap().1.total
}

#[test]
fn trident_is_the_sum_of_three_pair_losses() {
    let (model, store) = tiny_model(true);
    let (v1, v2, p) = (images(5, 3, 7), images(5, 3, 8), images(5, 1, 9));
    for k in [LossKind::vicreg(), LossKind::infonce()] {
        let mut g = Graph::new();
        let obj = trident_objective(&mut g, &store, &model, &v1, &v2, Some(&p), &k, Binding::Trainable).unwrap();
        let br = obj.breakdown;
        let labels: Vec<&str> = br.pairs.iter().map(|t| t.label.as_str()).collect();
        assert_eq!(labels, ["v1-v2", "v1-priv", "v2-priv"]);
        let explicit = pair_total(&model, &store, &v1, &v2, false, &k)
            + pair_total(&model, &store, &v1, &p, true, &k)
            + pair_total(&model, &store, &v2, &p, true, &k);
        assert!((br.total - explicit).abs() < 1e-6 * explicit.abs().max(1.0));
        assert!((g.value(obj.root).item() - br.total).abs() < 1e-9);
        assert!((br.recompose(Some(&k)) - br.total).abs() < 1e-6 * br.total.abs().max(1.0));

        // Dropping the privileged terms leaves the Siamese objective.
        let siamese = siamese_total(&model, &store, &v1, &v2, SiameseMode::Unprivileged, &k);
        assert_eq!(br.pair("v1-v2").unwrap().total, siamese.total);
    }
}

#[test]
fn trident_with_privileged_equal_to_view2() {
    let model = SslModel::new(tiny_encoder(3), Some(tiny_encoder(3)), tiny_projector()).unwrap();
    let mut store = model.init(4).cast::<f64>();
    for (k, v) in store.subset("primary.").iter().map(|(k, v)| (k.replacen("primary.", "priv.", 1), v.clone())).collect::<Vec<_>>() {
        store.insert(k, v);
    }
    let (v1, v2) = (images(5, 3, 10), images(5, 3, 11));
    let k = LossKind::infonce();
    let mut g = Graph::new();
    let br = trident_objective(&mut g, &store, &model, &v1, &v2, Some(&v2), &k, Binding::Trainable).unwrap().breakdown;
    let l12 = pair_total(&model, &store, &v1, &v2, false, &k);
    let l22 = pair_total(&model, &store, &v2, &v2, false, &k);
    assert!((br.total - (2.0 * l12 + l22)).abs() < 1e-9);
}

#[test]
fn trident_vanishes_when_all_projections_agree_and_spread() {
    let z = spread_batch();
    let k = LossKind::vicreg();
    let mut g = Graph::<f64>::new();
    let (a, b, c) = (g.input(z.clone()), g.input(z.clone()), g.input(z));
    let total: f64 = [(a, b), (a, c), (b, c)].iter().map(|&(x, y)| pair_loss(&mut g, x, y, &k, "p").unwrap().1.total).sum();
    assert_eq!(total, 0.0);
}

fn objective_gradcheck(trident: bool, k: LossKind) {
    let (model, store) = tiny_model(trident);
    let (v1, v2, p) = (images(4, 3, 12), images(4, 3, 13), images(4, 1, 14));
    let eval = |s: &ParamStore<f64>, grads: bool| {
        let mut g = Graph::new();
        let obj = if trident {
            trident_objective(&mut g, s, &model, &v1, &v2, Some(&p), &k, Binding::Trainable)
        } else {
            siamese_objective(&mut g, s, &model, &v1, &v2, SiameseMode::Unprivileged, &k, Binding::Trainable)
        }
        .unwrap();
        (g.value(obj.root).item(), grads.then(|| g.backward(obj.root).into_params()))
    };
    let (_, grads) = eval(&store, true);
    assert!(store.numel() <= 10_000);
    // Biases feeding batch norm have zero true gradient; the floor absorbs
    // rounding noise there.
    let report = check_params(&store, &grads.unwrap(), 1e-5, 1e-4, |s| eval(s, false).0);
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn siamese_gradients_match_finite_differences() {
    objective_gradcheck(false, LossKind::vicreg());
    objective_gradcheck(false, LossKind::infonce());
}

#[test]
fn trident_gradients_match_finite_differences() {
    objective_gradcheck(true, LossKind::vicreg());
    objective_gradcheck(true, LossKind::infonce());
}

#[test]
fn method_kind_requirements() {
    assert!(MethodKind::Trident.needs_privileged());
    assert!(MethodKind::SiamesePrivileged.needs_privileged());
    assert!(!MethodKind::SiameseUnprivileged.needs_privileged());
    assert_eq!(serde_json::to_string(&MethodKind::SiameseUnprivileged).unwrap(), "\"siamese_unprivileged\"");
}
