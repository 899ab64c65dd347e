use std::collections::HashSet;

use privdistil_nn::{AdamW, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{apply_domain_shift, Sample, ShiftParams};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::sslcore::{cross_entropy, Encoder};

const ENCODE_CHUNK: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 20, learning_rate: 1e-3, batch_size: 64, seed: 0 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("invalid probe config {self:?}")));
        }
        Ok(())
    }
}

/// Frozen-encoder representations as `f64` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Embeddings {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if rows.len() != labels.len() || rows.is_empty() {
            return Err(Error::Shape(format!("{} rows for {} labels", rows.len(), labels.len())));
        }
        let d = rows[0].len();
        if d == 0 || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("ragged embedding rows".into()));
        }
        Ok(Self { rows, labels })
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn tensor(&self, idx: &[usize]) -> Tensor<f64> {
        Tensor::new([idx.len(), self.dim()], idx.iter().flat_map(|&i| self.rows[i].iter().copied()).collect())
    }
}

/// Representations of `samples`' primary images.
pub fn embed_samples(encoder: &Encoder, params: &ParamStore<f32>, samples: &[Sample]) -> Result<Embeddings> {
    let images: Vec<&ImageTensor> = samples.iter().map(|s| &s.primary).collect();
    embed_images(encoder, params, &images, samples.iter().map(|s| s.label).collect())
}

pub fn embed_images(encoder: &Encoder, params: &ParamStore<f32>, images: &[&ImageTensor], labels: Vec<usize>) -> Result<Embeddings> {
    let t = encoder.encode_images(params, images, ENCODE_CHUNK)?;
    let (_, d) = t.dims2();
    Embeddings::new(t.data().chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect(), labels)
}

/// Single dense softmax layer over standardized representations. The
/// standardization is affine, so it folds into the layer (see `folded`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHead {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// `[D, K]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
}

impl ProbeHead {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Weight `[D, K]` and bias `[K]` acting on raw representations.
    pub fn folded(&self) -> (Tensor<f64>, Tensor<f64>) {
        let (d, k) = (self.dim(), self.classes);
        let mut w = vec![0.0; d * k];
        let mut b = self.bias.clone();
        for j in 0..d {
            for c in 0..k {
                w[j * k + c] = self.weight[j * k + c] * self.inv_std[j];
                b[c] -= self.mean[j] * w[j * k + c];
            }
        }
        (Tensor::new([d, k], w), Tensor::new([k], b))
    }

    pub fn logits(&self, row: &[f64]) -> Vec<f64> {
        let k = self.classes;
        let mut out = self.bias.clone();
        for (j, &x) in row.iter().enumerate() {
            let z = (x - self.mean[j]) * self.inv_std[j];
            for c in 0..k {
                out[c] += z * self.weight[j * k + c];
            }
        }
        out
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let l = self.logits(row);
        (0..l.len()).fold(0, |best, c| if l[c] > l[best] { c } else { best })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Zero for classes absent from the evaluated split.
    pub per_class_accuracy: Vec<f64>,
    pub support: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl ProbeResult {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!("{} predictions for {} labels", predicted.len(), labels.len())));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &y) in predicted.iter().zip(labels) {
            if p >= classes || y >= classes {
                return Err(Error::Config(format!("class index out of range ({p}, {y}) for {classes} classes")));
            }
            confusion[y][p] += 1;
        }
        let support: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
        let per_class_accuracy =
            (0..classes).map(|c| if support[c] == 0 { 0.0 } else { confusion[c][c] as f64 / support[c] as f64 }).collect();
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        Ok(Self { accuracy: correct as f64 / labels.len() as f64, per_class_accuracy, support, confusion })
    }
}

/// Fits the head on `train`. Errors if a class in `0..classes` has no
/// training sample.
pub fn train_probe(train: &Embeddings, classes: usize, cfg: &ProbeConfig) -> Result<ProbeHead> {
    cfg.validate()?;
    let present: HashSet<usize> = train.labels.iter().copied().collect();
    if let Some(c) = (0..classes).find(|c| !present.contains(c)) {
        return Err(Error::Config(format!("class {c} is absent from the probe training split")));
    }
    if let Some(&l) = train.labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Config(format!("label {l} out of range for {classes} classes")));
    }
    let (n, d) = (train.len(), train.dim());
    let mut mean = vec![0.0; d];
    for r in &train.rows {
        for j in 0..d {
            mean[j] += r[j] / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for r in &train.rows {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-6)).collect();
    let standardized = Embeddings {
        rows: train.rows.iter().map(|r| (0..d).map(|j| (r[j] - mean[j]) * inv_std[j]).collect()).collect(),
        labels: train.labels.clone(),
    };
    let mut store = ParamStore::<f64>::new();
    store.insert("w", Tensor::zeros([d, classes]));
    store.insert("b", Tensor::zeros([classes]));
    let mut opt = AdamW::new(0.9, 0.999, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.batch_size.min(n);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(batch) {
            let mut g = Graph::new();
            let x = g.input(standardized.tensor(idx));
            let w = store.bind(&mut g, "w");
            let b = store.bind(&mut g, "b");
            let logits = g.linear(x, w, Some(b));
            let labels: Vec<usize> = idx.iter().map(|&i| standardized.labels[i]).collect();
            let (root, _) = cross_entropy(&mut g, logits, &labels)?;
            let grads = g.backward(root);
            opt.step(&mut store, grads.params(), cfg.learning_rate);
        }
    }
    Ok(ProbeHead {
        mean,
        inv_std,
        weight: store.get("w").unwrap().data().to_vec(),
        bias: store.get("b").unwrap().data().to_vec(),
        classes,
    })
}

pub fn evaluate_probe(head: &ProbeHead, data: &Embeddings) -> Result<ProbeResult> {
    if data.dim() != head.dim() {
        return Err(Error::Shape(format!("probe expects width {}, got {}", head.dim(), data.dim())));
    }
    let pred: Vec<usize> = data.rows.iter().map(|r| head.predict(r)).collect();
    ProbeResult::from_predictions(&pred, &data.labels, head.classes)
}

/// Trains a probe on the frozen encoder's train-split representations and
/// evaluates it on the test split. The encoder parameters are only read.
pub fn linear_probe(
    encoder: &Encoder,
    params: &ParamStore<f32>,
    train: &[Sample],
    test: &[Sample],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(ProbeHead, ProbeResult)> {
    let train_ids: HashSet<&str> = train.iter().map(|s| s.id.as_str()).collect();
    if let Some(s) = test.iter().find(|s| train_ids.contains(s.id.as_str())) {
        return Err(Error::Config(format!("sample {} is in both probe splits", s.id)));
    }
    let head = train_probe(&embed_samples(encoder, params, train)?, classes, cfg)?;
    let result = evaluate_probe(&head, &embed_samples(encoder, params, test)?)?;
    Ok((head, result))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodResult {
    pub in_distribution: ProbeResult,
    pub shifted: ProbeResult,
    /// In-distribution accuracy minus shifted accuracy.
    pub drop: f64,
}

/// Evaluates an already-trained probe on `test` before and after `shift`.
pub fn ood_eval(
    encoder: &Encoder,
    params: &ParamStore<f32>,
    head: &ProbeHead,
    test: &[Sample],
    shift: &ShiftParams,
) -> Result<OodResult> {
    let clean = evaluate_probe(head, &embed_samples(encoder, params, test)?)?;
    let shifted = if shift.is_identity() {
        clean.clone()
    } else {
        let images = test.iter().map(|s| apply_domain_shift(&s.primary, shift)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageTensor> = images.iter().collect();
        evaluate_probe(head, &embed_images(encoder, params, &refs, test.iter().map(|s| s.label).collect())?)?
    };
    let drop = clean.accuracy - shifted.accuracy;
    Ok(OodResult { in_distribution: clean, shifted, drop })
}
