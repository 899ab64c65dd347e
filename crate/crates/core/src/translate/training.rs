use std::collections::BTreeMap;

use privdistil_nn::{AdamW, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Discriminator, Generator};
use super::{TranslateConfig, TranslatorMode};
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::sslcore::Binding;
use crate::train::{Checkpoint, CheckpointMeta};

pub const GEN_AB: &str = "g_ab";
pub const GEN_BA: &str = "g_ba";
pub const DISC_A: &str = "d_a";
pub const DISC_B: &str = "d_b";
pub const TRANSLATOR_KIND: &str = "translator";

const ADAM_BETA1: f64 = 0.5;
const ADAM_BETA2: f64 = 0.999;
const TRANSLATE_CHUNK: usize = 16;

/// Losses of one optimization step. Inactive terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TranslateStepRecord {
    pub step: usize,
    /// Weighted generator objective.
    pub generator: f64,
    pub discriminator: f64,
    /// Paired L1 between output and target.
    pub reconstruction: f64,
    /// Sum of both cycle L1 terms.
    pub cycle: f64,
    pub identity: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TranslatorHistory {
    pub steps: Vec<TranslateStepRecord>,
    /// Paired mode: mean per-image MAE on the held-out pairs.
    pub holdout_mae: Option<f64>,
    pub holdout_ids: Vec<usize>,
}

impl TranslatorHistory {
    /// Mean of `field` over steps `[start, start + len)`.
    pub fn window_mean(&self, start: usize, len: usize, field: impl Fn(&TranslateStepRecord) -> f64) -> Option<f64> {
        let w = self.steps.get(start..start.checked_add(len)?)?;
        (!w.is_empty()).then(|| w.iter().map(&field).sum::<f64>() / w.len() as f64)
    }
}

/// Trained (or freshly initialized) translator. `g_ab` maps the input
/// domain to the output domain; unpaired translators also carry the reverse
/// generator and one discriminator per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TranslatorParams {
    pub mode: TranslatorMode,
    pub config: TranslateConfig,
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub tensors: ParamStore<f32>,
    pub history: TranslatorHistory,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TranslatorSpec {
    mode: TranslatorMode,
    config: TranslateConfig,
    in_channels: usize,
    out_channels: usize,
    height: usize,
    width: usize,
    history: TranslatorHistory,
}

struct Nets {
    g_ab: Generator,
    g_ba: Option<Generator>,
    d_a: Option<Discriminator>,
    d_b: Option<Discriminator>,
}

fn nets(mode: TranslatorMode, cfg: &TranslateConfig, cin: usize, cout: usize) -> Nets {
    match mode {
        TranslatorMode::Paired => Nets {
            g_ab: Generator::new(cfg, GEN_AB, cin, cout),
            g_ba: None,
            d_a: None,
            // conditional: judges (input, output) stacked along channels
            d_b: cfg.adversarial.then(|| Discriminator::new(cfg, DISC_B, cin + cout)),
        },
        TranslatorMode::Unpaired => Nets {
            g_ab: Generator::new(cfg, GEN_AB, cin, cout),
            g_ba: Some(Generator::new(cfg, GEN_BA, cout, cin)),
            d_a: Some(Discriminator::new(cfg, DISC_A, cin)),
            d_b: Some(Discriminator::new(cfg, DISC_B, cout)),
        },
    }
}

fn init_store(n: &Nets, seed: u64) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    n.g_ab.init(&mut rng, &mut store);
    if let Some(g) = &n.g_ba {
        g.init(&mut rng, &mut store);
    }
    for d in [&n.d_a, &n.d_b].into_iter().flatten() {
        d.init(&mut rng, &mut store);
    }
    store
}

fn count_prefixed(store: &ParamStore<f32>, prefix: &str) -> usize {
    store.names().filter(|n| n.starts_with(&format!("{prefix}."))).count()
}

impl TranslatorParams {
    fn nets(&self) -> Nets {
        nets(self.mode, &self.config, self.in_channels, self.out_channels)
    }

    /// Number of generators and discriminators present.
    pub fn network_counts(&self) -> (usize, usize) {
        let gens = [GEN_AB, GEN_BA].iter().filter(|p| count_prefixed(&self.tensors, p) > 0).count();
        let discs = [DISC_A, DISC_B].iter().filter(|p| count_prefixed(&self.tensors, p) > 0).count();
        (gens, discs)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.tensors.all_finite() {
            return Err(Error::Checkpoint("translator has non-finite weights".into()));
        }
        let (gens, discs) = self.network_counts();
        let ok = match self.mode {
            TranslatorMode::Paired => gens == 1,
            TranslatorMode::Unpaired => gens == 2 && discs == 2,
        };
        if !ok {
            return Err(Error::Checkpoint(format!(
                "{} translator with {gens} generators and {discs} discriminators",
                self.mode.as_str()
            )));
        }
        let expected = init_store(&self.nets(), 0);
        let ck = Checkpoint::new(self.tensors.clone(), empty_meta());
        ck.check_names(&expected)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let spec = TranslatorSpec {
            mode: self.mode,
            config: self.config.clone(),
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            height: self.height,
            width: self.width,
            history: self.history.clone(),
        };
        let mut metrics = BTreeMap::new();
        if let Some(m) = self.history.holdout_mae {
            metrics.insert("holdout_mae".to_string(), m);
        }
        if let Some(last) = self.history.steps.last() {
            metrics.insert("generator".to_string(), last.generator);
            metrics.insert("discriminator".to_string(), last.discriminator);
            metrics.insert("cycle".to_string(), last.cycle);
            metrics.insert("reconstruction".to_string(), last.reconstruction);
        }
        Ok(Checkpoint::new(
            self.tensors.clone(),
            CheckpointMeta {
                kind: TRANSLATOR_KIND.to_string(),
                config: serde_json::to_value(&spec)?,
                epoch: self.history.steps.len(),
                metrics,
            },
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.kind != TRANSLATOR_KIND {
            return Err(Error::Checkpoint(format!("expected a {TRANSLATOR_KIND} checkpoint, found {:?}", ck.meta.kind)));
        }
        let spec: TranslatorSpec = serde_json::from_value(ck.meta.config.clone())?;
        spec.config.validate(spec.mode)?;
        let params = Self {
            mode: spec.mode,
            config: spec.config,
            in_channels: spec.in_channels,
            out_channels: spec.out_channels,
            height: spec.height,
            width: spec.width,
            tensors: ck.tensors.clone(),
            history: spec.history,
        };
        params.validate()?;
        Ok(params)
    }

    fn check_input(&self, img: &ImageTensor) -> Result<()> {
        if img.height() != self.height || img.width() != self.width || img.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "translator expects {}x{}x{}, got {}x{}x{}",
                self.height,
                self.width,
                self.in_channels,
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        Ok(())
    }
}

fn empty_meta() -> CheckpointMeta {
    CheckpointMeta { kind: TRANSLATOR_KIND.into(), config: serde_json::Value::Null, epoch: 0, metrics: BTreeMap::new() }
}

fn run_generator(g: &Generator, store: &ParamStore<f32>, batch: Tensor<f32>) -> Tensor<f32> {
    let mut graph = Graph::new();
    let x = graph.input(batch);
    let y = g.forward(&mut graph, store, Binding::Frozen, x);
    graph.value(y).clone()
}

fn unbatch(t: &Tensor<f32>) -> Result<Vec<ImageTensor>> {
    let (n, c, h, w) = t.dims4();
    let per = c * h * w;
    (0..n).map(|i| ImageTensor::from_chw(h, w, c, &t.data()[i * per..(i + 1) * per])).collect()
}

/// Applies the forward generator to one image. Output values lie in
/// `[0, 1]`.
pub fn translate(params: &TranslatorParams, img: &ImageTensor) -> Result<ImageTensor> {
    Ok(translate_batch(params, &[img])?.remove(0))
}

/// [`translate`] over many images, evaluated in fixed-size chunks.
pub fn translate_batch(params: &TranslatorParams, images: &[&ImageTensor]) -> Result<Vec<ImageTensor>> {
    for img in images {
        params.check_input(img)?;
    }
    let g = params.nets().g_ab;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(TRANSLATE_CHUNK) {
        out.extend(unbatch(&run_generator(&g, &params.tensors, ImageTensor::batch(chunk)?))?);
    }
    Ok(out)
}

fn check_same_size(images: &[&ImageTensor], what: &str) -> Result<(usize, usize, usize)> {
    let first = images.first().ok_or_else(|| Error::Degenerate(format!("{what} is empty")))?;
    for img in images {
        if !img.same_size(first) || img.channels() != first.channels() {
            return Err(Error::Shape(format!(
                "{what} mixes {}x{}x{} with {}x{}x{}",
                first.height(),
                first.width(),
                first.channels(),
                img.height(),
                img.width(),
                img.channels()
            )));
        }
    }
    Ok((first.height(), first.width(), first.channels()))
}

/// Cycles through a shuffled index order, reshuffling after each pass.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(items: Vec<usize>, seed: u64) -> Self {
        let mut s = Self { order: items, pos: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Constant for the first half, then linear decay to zero.
fn step_lr(step: usize, total: usize, peak: f64) -> f64 {
    let half = total / 2;
    if step < half {
        peak
    } else {
        peak * (total - step) as f64 / (total - half) as f64
    }
}

fn l1(g: &mut Graph<f32>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean_all(d)
}

/// Least-squares adversarial term: mean of `(s - target)^2`.
fn lsq(g: &mut Graph<f32>, s: Var, target: f32) -> Var {
    let d = g.add_scalar(s, -target);
    let d = g.square(d);
    g.mean_all(d)
}

fn item(g: &Graph<f32>, v: Var) -> f64 {
    g.value(v).item() as f64
}

fn gather(images: &[&ImageTensor], idx: &[usize]) -> Result<Tensor<f32>> {
    let picked: Vec<&ImageTensor> = idx.iter().map(|&i| images[i]).collect();
    ImageTensor::batch(&picked)
}

fn finite(rec: &TranslateStepRecord) -> Result<()> {
    if [rec.generator, rec.discriminator, rec.reconstruction, rec.cycle, rec.identity].iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step: rec.step })
    }
}

/// Paired translator: L1 reconstruction, plus a conditional least-squares
/// adversarial term when enabled. A seeded fraction of the pairs is held
/// out and scored with per-image MAE after training.
pub fn train_paired_translator(pairs: &[(&ImageTensor, &ImageTensor)], cfg: &TranslateConfig) -> Result<TranslatorParams> {
    cfg.validate(TranslatorMode::Paired)?;
    if pairs.len() < 2 {
        return Err(Error::Degenerate(format!("paired translator needs at least 2 pairs, got {}", pairs.len())));
    }
    let inputs: Vec<&ImageTensor> = pairs.iter().map(|p| p.0).collect();
    let targets: Vec<&ImageTensor> = pairs.iter().map(|p| p.1).collect();
    let (h, w, cin) = check_same_size(&inputs, "translator inputs")?;
    let (th, tw, cout) = check_same_size(&targets, "translator targets")?;
    if (th, tw) != (h, w) {
        return Err(Error::Shape(format!("inputs are {h}x{w} but targets are {th}x{tw}")));
    }
    cfg.check_image_size(h, w)?;

    let n = pairs.len();
    let mut split_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5b11_7000);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut split_rng);
    let n_hold = ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
    let mut holdout = idx[..n_hold].to_vec();
    holdout.sort_unstable();
    let train_idx = idx[n_hold..].to_vec();

    let nets = nets(TranslatorMode::Paired, cfg, cin, cout);
    let mut store = init_store(&nets, cfg.seed);
    let mut opt_g = AdamW::new(ADAM_BETA1, ADAM_BETA2, 0.0);
    let mut opt_d = AdamW::new(ADAM_BETA1, ADAM_BETA2, 0.0);
    let batch = cfg.batch_size.min(train_idx.len());
    let mut sampler = Sampler::new(train_idx, cfg.seed ^ 0xda7a_5eed);
    let mut history = TranslatorHistory { holdout_ids: holdout.clone(), ..Default::default() };

    for step in 0..cfg.steps {
        let lr = step_lr(step, cfg.steps, cfg.learning_rate);
        let b = sampler.next(batch);
        let x_t = gather(&inputs, &b)?;
        let y_t = gather(&targets, &b)?;
        let mut rec = TranslateStepRecord { step, ..Default::default() };

        let mut g = Graph::new();
        let x = g.input(x_t.clone());
        let y = g.input(y_t.clone());
        let fake = nets.g_ab.forward(&mut g, &store, Binding::Trainable, x);
        let r = l1(&mut g, fake, y);
        rec.reconstruction = item(&g, r);
        let mut loss = g.scale(r, cfg.lambda_rec as f32);
        if let Some(d) = &nets.d_b {
            let pair = g.concat_channels(&[x, fake]);
            let s = d.forward(&mut g, &store, Binding::Frozen, pair);
            let adv = lsq(&mut g, s, 1.0);
            let adv = g.scale(adv, cfg.lambda_adv as f32);
            loss = g.add(loss, adv);
        }
        rec.generator = item(&g, loss);
        let fake_t = g.value(fake).clone();
        finite(&rec)?;
        let grads = g.backward(loss).into_params();
        opt_g.step(&mut store, &grads, lr);

        if let Some(d) = &nets.d_b {
            let mut g = Graph::new();
            let x = g.input(x_t);
            let real = g.input(y_t);
            let fake = g.input(fake_t);
            let real_pair = g.concat_channels(&[x, real]);
            let fake_pair = g.concat_channels(&[x, fake]);
            let sr = d.forward(&mut g, &store, Binding::Trainable, real_pair);
            let sf = d.forward(&mut g, &store, Binding::Trainable, fake_pair);
            let lr_ = lsq(&mut g, sr, 1.0);
            let lf = lsq(&mut g, sf, 0.0);
            let s = g.add(lr_, lf);
            let loss_d = g.scale(s, 0.5);
            rec.discriminator = item(&g, loss_d);
            finite(&rec)?;
            let grads = g.backward(loss_d).into_params();
            opt_d.step(&mut store, &grads, lr);
        }
        history.steps.push(rec);
    }

    let mut params = TranslatorParams {
        mode: TranslatorMode::Paired,
        config: cfg.clone(),
        in_channels: cin,
        out_channels: cout,
        height: h,
        width: w,
        tensors: store,
        history,
    };
    let held_in: Vec<&ImageTensor> = holdout.iter().map(|&i| inputs[i]).collect();
    let outs = translate_batch(&params, &held_in)?;
    let mut total = 0.0;
    for (o, &i) in outs.iter().zip(&holdout) {
        total += o.mae(targets[i])?;
    }
    params.history.holdout_mae = Some(total / holdout.len() as f64);
    Ok(params)
}

/// Unpaired translator between domains A and B: least-squares adversarial
/// terms in both directions, cycle reconstruction, and an identity term
/// when both domains have the same channel count.
pub fn train_unpaired_translator(
    domain_a: &[&ImageTensor],
    domain_b: &[&ImageTensor],
    cfg: &TranslateConfig,
) -> Result<TranslatorParams> {
    cfg.validate(TranslatorMode::Unpaired)?;
    let (h, w, cin) = check_same_size(domain_a, "domain A")?;
    let (hb, wb, cout) = check_same_size(domain_b, "domain B")?;
    if (hb, wb) != (h, w) {
        return Err(Error::Shape(format!("domain A is {h}x{w} but domain B is {hb}x{wb}")));
    }
    cfg.check_image_size(h, w)?;

    let nets = nets(TranslatorMode::Unpaired, cfg, cin, cout);
    let (g_ba, d_a, d_b) = (nets.g_ba.as_ref().unwrap(), nets.d_a.as_ref().unwrap(), nets.d_b.as_ref().unwrap());
    let use_identity = cin == cout && cfg.lambda_id > 0.0;
    let mut store = init_store(&nets, cfg.seed);
    let mut opt_g = AdamW::new(ADAM_BETA1, ADAM_BETA2, 0.0);
    let mut opt_d = AdamW::new(ADAM_BETA1, ADAM_BETA2, 0.0);
    let batch = cfg.batch_size.min(domain_a.len()).min(domain_b.len());
    let mut sample_a = Sampler::new((0..domain_a.len()).collect(), cfg.seed ^ 0xda7a_5eed);
    let mut sample_b = Sampler::new((0..domain_b.len()).collect(), cfg.seed ^ 0xda7a_5eee);
    let mut history = TranslatorHistory::default();

    for step in 0..cfg.steps {
        let lr = step_lr(step, cfg.steps, cfg.learning_rate);
        let a_t = gather(domain_a, &sample_a.next(batch))?;
        let b_t = gather(domain_b, &sample_b.next(batch))?;
        let mut rec = TranslateStepRecord { step, ..Default::default() };

        let mut g = Graph::new();
        let a = g.input(a_t.clone());
        let b = g.input(b_t.clone());
        let fake_b = nets.g_ab.forward(&mut g, &store, Binding::Trainable, a);
        let fake_a = g_ba.forward(&mut g, &store, Binding::Trainable, b);
        let back_a = g_ba.forward(&mut g, &store, Binding::Trainable, fake_b);
        let back_b = nets.g_ab.forward(&mut g, &store, Binding::Trainable, fake_a);
        let ca = l1(&mut g, back_a, a);
        let cb = l1(&mut g, back_b, b);
        let cycle = g.add(ca, cb);
        rec.cycle = item(&g, cycle);
        let sb = d_b.forward(&mut g, &store, Binding::Frozen, fake_b);
        let sa = d_a.forward(&mut g, &store, Binding::Frozen, fake_a);
        let adv_b = lsq(&mut g, sb, 1.0);
        let adv_a = lsq(&mut g, sa, 1.0);
        let adv = g.add(adv_a, adv_b);
        let adv = g.scale(adv, cfg.lambda_adv as f32);
        let cyc = g.scale(cycle, cfg.lambda_cyc as f32);
        let mut loss = g.add(adv, cyc);
        if use_identity {
            let ib = nets.g_ab.forward(&mut g, &store, Binding::Trainable, b);
            let ia = g_ba.forward(&mut g, &store, Binding::Trainable, a);
            let lb = l1(&mut g, ib, b);
            let la = l1(&mut g, ia, a);
            let id = g.add(la, lb);
            rec.identity = item(&g, id);
            let id = g.scale(id, cfg.lambda_id as f32);
            loss = g.add(loss, id);
        }
        rec.generator = item(&g, loss);
        finite(&rec)?;
        let (fake_a_t, fake_b_t) = (g.value(fake_a).clone(), g.value(fake_b).clone());
        let grads = g.backward(loss).into_params();
        opt_g.step(&mut store, &grads, lr);

        let mut g = Graph::new();
        let disc_loss = |g: &mut Graph<f32>, d: &Discriminator, real: Tensor<f32>, fake: Tensor<f32>| {
            let real = g.input(real);
            let fake = g.input(fake);
            let sr = d.forward(g, &store, Binding::Trainable, real);
            let sf = d.forward(g, &store, Binding::Trainable, fake);
            let lr_ = lsq(g, sr, 1.0);
            let lf = lsq(g, sf, 0.0);
            let s = g.add(lr_, lf);
            g.scale(s, 0.5)
        };
        let la = disc_loss(&mut g, d_a, a_t, fake_a_t);
        let lb = disc_loss(&mut g, d_b, b_t, fake_b_t);
        let loss_d = g.add(la, lb);
        rec.discriminator = item(&g, loss_d);
        finite(&rec)?;
        let grads = g.backward(loss_d).into_params();
        opt_d.step(&mut store, &grads, lr);
        history.steps.push(rec);
    }

    Ok(TranslatorParams {
        mode: TranslatorMode::Unpaired,
        config: cfg.clone(),
        in_channels: cin,
        out_channels: cout,
        height: h,
        width: w,
        tensors: store,
        history,
    })
}

/// Freshly initialized translator, as training with zero steps would
/// produce (without the held-out score).
pub fn init_translator(
    mode: TranslatorMode,
    cfg: &TranslateConfig,
    in_channels: usize,
    out_channels: usize,
    height: usize,
    width: usize,
) -> Result<TranslatorParams> {
    cfg.validate(mode)?;
    cfg.check_image_size(height, width)?;
    Ok(TranslatorParams {
        mode,
        config: cfg.clone(),
        in_channels,
        out_channels,
        height,
        width,
        tensors: init_store(&nets(mode, cfg, in_channels, out_channels), cfg.seed),
        history: TranslatorHistory::default(),
    })
}
