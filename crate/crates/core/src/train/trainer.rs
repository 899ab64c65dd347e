use std::collections::BTreeMap;

use privdistil_nn::{kaiming_uniform, AdamW, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::{augment, lr_at, TrainConfig};
use crate::datamodel::{DatasetManifest, Sample, Split};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::sslcore::{
    cross_entropy, siamese_objective, trident_objective, Binding, Encoder, LossBreakdown, MethodKind, SiameseMode,
    SslModel, PRIMARY_PREFIX,
};

pub const SSL_CHECKPOINT: &str = "ssl";
pub const SUPERVISED_CHECKPOINT: &str = "supervised";
pub const HEAD_PREFIX: &str = "cls";
const EVAL_CHUNK: usize = 128;

/// Everything needed to rebuild the trained model; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub train: TrainConfig,
    pub privileged_channels: Option<usize>,
    pub class_count: usize,
}

impl RunSpec {
    pub fn ssl_model(&self) -> Result<SslModel> {
        let priv_enc = match (self.train.method.needs_privileged(), self.privileged_channels) {
            (true, Some(c)) => Some(self.train.privileged_encoder(c)),
            (true, None) => return Err(Error::Incompatible(format!("{} needs privileged images", self.train.method.as_str()))),
            (false, _) => None,
        };
        SslModel::new(self.train.encoder.clone(), priv_enc, self.train.projector.clone())
    }

    pub fn primary_encoder(&self) -> Result<Encoder> {
        Encoder::new(self.train.encoder.clone(), format!("{PRIMARY_PREFIX}.enc"))
    }

    /// Freshly initialized parameters for this run.
    pub fn init_params(&self) -> Result<ParamStore<f32>> {
        if self.train.method == MethodKind::Supervised {
            let enc = self.primary_encoder()?;
            let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
            let mut store = ParamStore::new();
            enc.init(&mut rng, &mut store);
            let d = self.train.encoder.embed_dim;
            store.insert(format!("{HEAD_PREFIX}.w"), kaiming_uniform(&mut rng, &[d, self.class_count], d));
            store.insert(format!("{HEAD_PREFIX}.b"), Tensor::zeros([self.class_count]));
            Ok(store)
        } else {
            Ok(self.ssl_model()?.init(self.train.seed))
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.kind != SSL_CHECKPOINT && ck.meta.kind != SUPERVISED_CHECKPOINT {
            return Err(Error::Checkpoint(format!("checkpoint kind {:?} is not an encoder run", ck.meta.kind)));
        }
        serde_json::from_value(ck.meta.config.clone()).map_err(|e| Error::Checkpoint(format!("run spec: {e}")))
    }
}

/// The primary encoder of an SSL or supervised checkpoint, with only its
/// own parameters.
pub fn load_primary_encoder(ck: &Checkpoint) -> Result<(Encoder, ParamStore<f32>)> {
    let spec = RunSpec::from_checkpoint(ck)?;
    ck.check_names(&spec.init_params()?)?;
    let enc = spec.primary_encoder()?;
    let params = ck.tensors.subset(&format!("{}.", enc.prefix));
    Ok((enc, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// Steps strictly increasing and every logged lr equal to the schedule.
    pub fn verify(&self, cfg: &TrainConfig, steps_per_epoch: usize) -> Result<()> {
        let total = cfg.epochs * steps_per_epoch;
        let warmup = cfg.warmup_epochs * steps_per_epoch;
        for (i, r) in self.steps.iter().enumerate() {
            if i > 0 && r.step <= self.steps[i - 1].step {
                return Err(Error::Config(format!("log steps not increasing at record {i}")));
            }
            if r.lr != lr_at(r.step, total, warmup, cfg.peak_lr)? {
                return Err(Error::Config(format!("logged lr at step {} differs from the schedule", r.step)));
            }
        }
        Ok(())
    }

    /// Mean step loss within each window of `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        self.steps.chunks(window.max(1)).map(|c| c.iter().map(|r| r.loss.total).sum::<f64>() / c.len() as f64).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Batches per epoch; the remainder of a shuffled epoch is dropped.
pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples / batch_size.min(samples).max(1)
}

struct Loop {
    total: usize,
    warmup: usize,
    batch: usize,
    per_epoch: usize,
}

impl Loop {
    fn new(cfg: &TrainConfig, n: usize, min_batch: usize) -> Result<Self> {
        let batch = cfg.batch_size.min(n);
        if batch < min_batch {
            return Err(Error::Incompatible(format!("{n} training samples cannot fill a batch of {min_batch}")));
        }
        let per_epoch = n / batch;
        Ok(Self { total: cfg.epochs * per_epoch, warmup: cfg.warmup_epochs * per_epoch, batch, per_epoch })
    }
}

fn check_images(cfg: &TrainConfig, samples: &[Sample]) -> Result<()> {
    let enc = &cfg.encoder;
    for s in samples {
        let p = &s.primary;
        if p.height() != enc.image_size || p.width() != enc.image_size || p.channels() != enc.in_channels {
            return Err(Error::Incompatible(format!(
                "sample {} is {}x{}x{}, encoder expects {}x{}x{}",
                s.id,
                p.height(),
                p.width(),
                p.channels(),
                enc.image_size,
                enc.image_size,
                enc.in_channels
            )));
        }
    }
    Ok(())
}

fn privileged_channels(method: MethodKind, samples: &[Sample]) -> Result<Option<usize>> {
    if !method.needs_privileged() {
        return Ok(None);
    }
    let mut channels = None;
    for s in samples {
        let p = s.privileged.as_ref().ok_or_else(|| {
            Error::Incompatible(format!("{} needs privileged images; sample {} has none", method.as_str(), s.id))
        })?;
        match channels {
            None => channels = Some(p.channels()),
            Some(c) if c != p.channels() => {
                return Err(Error::Incompatible("privileged images have mixed channel counts".into()))
            }
            _ => {}
        }
    }
    Ok(channels)
}

/// Self-supervised training on the train split of a manifest.
pub fn train_ssl(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let samples = manifest.load_samples(Split::Train)?;
    train_ssl_samples(&samples, manifest.class_count(), cfg)
}

/// Self-supervised training on in-memory samples.
pub fn train_ssl_samples(samples: &[Sample], class_count: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.method == MethodKind::Supervised {
        return Err(Error::Config("train_ssl called with the supervised method".into()));
    }
    check_images(cfg, samples)?;
    let spec = RunSpec { train: cfg.clone(), privileged_channels: privileged_channels(cfg.method, samples)?, class_count };
    let model = spec.ssl_model()?;
    let mut store = spec.init_params()?;
    let plan = Loop::new(cfg, samples.len(), 2)?;
    let mut opt = AdamW::new(cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a_5eed);
    let priv_aug = cfg.augmentation.spatial_only();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for b in 0..plan.per_epoch {
            let batch: Vec<&Sample> = order[b * plan.batch..(b + 1) * plan.batch].iter().map(|&i| &samples[i]).collect();
            let mut v1 = Vec::with_capacity(batch.len());
            let mut v2 = Vec::with_capacity(batch.len());
            let mut pv = Vec::with_capacity(batch.len());
            for s in &batch {
                v1.push(augment(&s.primary, &cfg.augmentation, &mut rng));
                if cfg.method != MethodKind::SiamesePrivileged {
                    v2.push(augment(&s.primary, &cfg.augmentation, &mut rng));
                }
                if let Some(p) = s.privileged.as_ref().filter(|_| cfg.method.needs_privileged()) {
                    pv.push(if cfg.augmentation.augment_privileged { augment(p, &priv_aug, &mut rng) } else { p.clone() });
                }
            }
            let t1 = ImageTensor::batch::<f32>(&v1.iter().collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let obj = match cfg.method {
                MethodKind::SiameseUnprivileged => {
                    let t2 = ImageTensor::batch::<f32>(&v2.iter().collect::<Vec<_>>())?;
                    siamese_objective(&mut g, &store, &model, &t1, &t2, SiameseMode::Unprivileged, &cfg.loss, Binding::Trainable)?
                }
                MethodKind::SiamesePrivileged => {
                    let tp = ImageTensor::batch::<f32>(&pv.iter().collect::<Vec<_>>())?;
                    siamese_objective(&mut g, &store, &model, &t1, &tp, SiameseMode::Privileged, &cfg.loss, Binding::Trainable)?
                }
                MethodKind::Trident => {
                    let t2 = ImageTensor::batch::<f32>(&v2.iter().collect::<Vec<_>>())?;
                    let tp = ImageTensor::batch::<f32>(&pv.iter().collect::<Vec<_>>())?;
                    trident_objective(&mut g, &store, &model, &t1, &t2, Some(&tp), &cfg.loss, Binding::Trainable)?
                }
                MethodKind::Supervised => unreachable!(),
            };
            if !obj.breakdown.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let lr = lr_at(step, plan.total, plan.warmup, cfg.peak_lr)?;
            let grads = g.backward(obj.root);
            opt.step(&mut store, grads.params(), lr);
            epoch_loss += obj.breakdown.total;
            log.steps.push(StepRecord { step, epoch, lr, loss: obj.breakdown });
            step += 1;
        }
        let mean_loss = epoch_loss / plan.per_epoch as f64;
        log.epochs.push(EpochRecord { epoch, mean_loss, metrics: BTreeMap::new() });
    }
    if !store.all_finite() {
        return Err(Error::NonFiniteLoss { step });
    }
    let mut metrics = BTreeMap::new();
    if let Some(last) = log.epochs.last() {
        metrics.insert("final_epoch_loss".to_string(), last.mean_loss);
    }
    let meta = CheckpointMeta { kind: SSL_CHECKPOINT.into(), config: serde_json::to_value(&spec)?, epoch: cfg.epochs, metrics };
    Ok(TrainOutcome { checkpoint: Checkpoint::new(store, meta), log })
}

fn head_logits(g: &mut Graph<f32>, store: &ParamStore<f32>, enc: &Encoder, bind: Binding, x: privdistil_nn::Var) -> privdistil_nn::Var {
    let h = enc.forward(g, store, bind, x);
    let w = bind.bind(g, store, &format!("{HEAD_PREFIX}.w"));
    let b = bind.bind(g, store, &format!("{HEAD_PREFIX}.b"));
    g.linear(h, w, Some(b))
}

/// Predicted classes of a supervised checkpoint's encoder and head.
pub fn supervised_predict(ck: &Checkpoint, images: &[&ImageTensor]) -> Result<Vec<usize>> {
    let spec = RunSpec::from_checkpoint(ck)?;
    if spec.train.method != MethodKind::Supervised {
        return Err(Error::Checkpoint("not a supervised checkpoint".into()));
    }
    ck.check_names(&spec.init_params()?)?;
    predict(&ck.tensors, &spec.primary_encoder()?, images)
}

fn predict(store: &ParamStore<f32>, enc: &Encoder, images: &[&ImageTensor]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let batch = ImageTensor::batch::<f32>(chunk)?;
        enc.check_input(batch.shape())?;
        let mut g = Graph::new();
        let x = g.input(batch);
        let logits = head_logits(&mut g, store, enc, Binding::Frozen, x);
        let t = g.value(logits);
        let (_, k) = t.dims2();
        out.extend(t.data().chunks(k).map(|row| {
            row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        }));
    }
    Ok(out)
}

fn accuracy(store: &ParamStore<f32>, enc: &Encoder, samples: &[Sample]) -> Result<f64> {
    let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.primary).collect();
    let pred = predict(store, enc, &images)?;
    Ok(pred.iter().zip(samples).filter(|(p, s)| **p == s.label).count() as f64 / samples.len() as f64)
}

/// Encoder plus a single dense softmax head trained with cross-entropy on
/// the train split; validation accuracy is logged per epoch.
pub fn train_supervised(manifest: &DatasetManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let train = manifest.load_samples(Split::Train)?;
    let val = manifest.load_samples(Split::Val)?;
    train_supervised_samples(&train, &val, manifest.class_count(), cfg)
}

pub fn train_supervised_samples(train: &[Sample], val: &[Sample], class_count: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut cfg = cfg.clone();
    cfg.method = MethodKind::Supervised;
    cfg.validate()?;
    check_images(&cfg, train)?;
    check_images(&cfg, val)?;
    if let Some(s) = train.iter().chain(val).find(|s| s.label >= class_count) {
        return Err(Error::Config(format!("sample {} has label {} >= {class_count}", s.id, s.label)));
    }
    let spec = RunSpec { train: cfg.clone(), privileged_channels: None, class_count };
    let enc = spec.primary_encoder()?;
    let mut store = spec.init_params()?;
    let plan = Loop::new(&cfg, train.len(), 1)?;
    let mut opt = AdamW::new(cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xda7a_5eed);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for b in 0..plan.per_epoch {
            let idx = &order[b * plan.batch..(b + 1) * plan.batch];
            let views: Vec<ImageTensor> = idx.iter().map(|&i| augment(&train[i].primary, &cfg.augmentation, &mut rng)).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let mut g = Graph::new();
            let x = g.input(ImageTensor::batch::<f32>(&views.iter().collect::<Vec<_>>())?);
            let logits = head_logits(&mut g, &store, &enc, Binding::Trainable, x);
            let (root, terms) = cross_entropy(&mut g, logits, &labels)?;
            if !terms.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let lr = lr_at(step, plan.total, plan.warmup, cfg.peak_lr)?;
            let grads = g.backward(root);
            opt.step(&mut store, grads.params(), lr);
            epoch_loss += terms.total;
            log.steps.push(StepRecord { step, epoch, lr, loss: LossBreakdown::from_pairs(vec![terms]) });
            step += 1;
        }
        let mut metrics = BTreeMap::new();
        if !val.is_empty() {
            metrics.insert("val_accuracy".to_string(), accuracy(&store, &enc, val)?);
        }
        log.epochs.push(EpochRecord { epoch, mean_loss: epoch_loss / plan.per_epoch as f64, metrics });
    }
    let mut metrics = BTreeMap::new();
    metrics.insert("train_accuracy".to_string(), accuracy(&store, &enc, train)?);
    if !val.is_empty() {
        metrics.insert("val_accuracy".to_string(), accuracy(&store, &enc, val)?);
    }
    let meta =
        CheckpointMeta { kind: SUPERVISED_CHECKPOINT.into(), config: serde_json::to_value(&spec)?, epoch: cfg.epochs, metrics };
    Ok(TrainOutcome { checkpoint: Checkpoint::new(store, meta), log })
}
