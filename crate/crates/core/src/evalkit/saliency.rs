use std::path::Path;

use privdistil_nn::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::ProbeHead;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::sslcore::{Binding, Encoder};

/// A classifier split at its last convolutional stage.
pub trait CamModel {
    /// Last convolutional activations `[N, C, h, w]`.
    fn features(&self, g: &mut Graph<f64>, x: Var) -> Var;
    /// Class logits `[N, K]` computed from `features`.
    fn logits(&self, g: &mut Graph<f64>, features: Var) -> Var;
    /// Rejects images the model cannot take.
    fn check_input(&self, _image: &ImageTensor) -> Result<()> {
        Ok(())
    }
}

/// A frozen encoder followed by a dense head acting on its representation.
pub struct EncoderWithHead<'a> {
    encoder: &'a Encoder,
    params: ParamStore<f64>,
    weight: Tensor<f64>,
    bias: Tensor<f64>,
}

impl<'a> EncoderWithHead<'a> {
    pub fn new(encoder: &'a Encoder, params: &ParamStore<f32>, weight: Tensor<f64>, bias: Tensor<f64>) -> Result<Self> {
        let d = encoder.config.embed_dim;
        match (weight.shape(), bias.shape()) {
            ([wd, k], [bk]) if *wd == d && k == bk => {}
            (w, b) => return Err(Error::Shape(format!("head {w:?}/{b:?} does not fit embed_dim {d}"))),
        }
        Ok(Self { encoder, params: params.cast(), weight, bias })
    }

    pub fn from_probe(encoder: &'a Encoder, params: &ParamStore<f32>, head: &ProbeHead) -> Result<Self> {
        let (w, b) = head.folded();
        Self::new(encoder, params, w, b)
    }
}

impl CamModel for EncoderWithHead<'_> {
    fn features(&self, g: &mut Graph<f64>, x: Var) -> Var {
        self.encoder.features(g, &self.params, Binding::Frozen, x)
    }

    fn logits(&self, g: &mut Graph<f64>, features: Var) -> Var {
        let h = self.encoder.head(g, &self.params, Binding::Frozen, features);
        let w = g.input(self.weight.clone());
        let b = g.input(self.bias.clone());
        g.linear(h, w, Some(b))
    }

    fn check_input(&self, image: &ImageTensor) -> Result<()> {
        self.encoder.check_input(&[1, image.channels(), image.height(), image.width()])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, non-negative.
    pub values: Vec<f64>,
    pub target_class: usize,
}

impl SaliencyMap {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Grey-scale PNG scaled so the largest value is white.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let max = self.values.iter().cloned().fold(0.0, f64::max);
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        let data = self.values.iter().map(|v| (v * scale) as f32).collect();
        ImageTensor::from_clipped(self.height, self.width, 1, data)?.save_png(path)
    }
}

/// Bilinear resize of a `h x w` grid to `out_h x out_w` with half-pixel
/// centres; a grid already at the target size is returned unchanged.
pub fn upsample_bilinear(grid: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if h == out_h && w == out_w {
        return grid.to_vec();
    }
    let mut out = vec![0.0; out_h * out_w];
    for y in 0..out_h {
        let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..out_w {
            let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(w - 1);
            out[y * out_w + x] = (1.0 - fy) * ((1.0 - fx) * grid[y0 * w + x0] + fx * grid[y0 * w + x1])
                + fy * ((1.0 - fx) * grid[y1 * w + x0] + fx * grid[y1 * w + x1]);
        }
    }
    out
}

fn class_score(g: &mut Graph<f64>, logits: Var, class: usize) -> Result<Var> {
    let k = g.shape(logits)[1];
    if class >= k {
        return Err(Error::Config(format!("target class {class} out of range for {k} classes")));
    }
    let picked = g.pick(logits, &[class]);
    Ok(g.sum_all(picked))
}

/// Guided Grad-CAM: the rectified class-activation map of the last conv
/// stage (channel weights are spatially averaged gradients), bilinearly
/// upsampled and multiplied by the channel-summed guided-backpropagation
/// gradient, then rectified.
pub fn guided_gradcam(model: &impl CamModel, image: &ImageTensor, target_class: usize) -> Result<SaliencyMap> {
    model.check_input(image)?;
    let (h, w) = (image.height(), image.width());
    let x = ImageTensor::batch::<f64>(&[image])?;

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let feats = model.features(&mut g, xv);
    let fshape = g.shape(feats).to_vec();
    let [_, c, fh, fw] = fshape[..] else {
        return Err(Error::Shape(format!("model has no convolutional stage (features {fshape:?})")));
    };
    let logits = model.logits(&mut g, feats);
    let score = class_score(&mut g, logits, target_class)?;
    let grads = g.backward(score);
    let dfeat = grads.get(feats).cloned().unwrap_or_else(|| Tensor::zeros(fshape.clone()));
    let fval = g.value(feats).data();
    let plane = fh * fw;
    let mut cam = vec![0.0; plane];
    for ch in 0..c {
        let alpha = dfeat.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        for p in 0..plane {
            cam[p] += alpha * fval[ch * plane + p];
        }
    }
    for v in &mut cam {
        *v = v.max(0.0);
    }
    let cam = upsample_bilinear(&cam, fh, fw, h, w);

    let mut gg = Graph::new().with_guided_relu(true);
    let xg = gg.leaf(x);
    let feats = model.features(&mut gg, xg);
    let logits = model.logits(&mut gg, feats);
    let score = class_score(&mut gg, logits, target_class)?;
    let ggrads = gg.backward(score);
    let dx = ggrads.get(xg).cloned().unwrap_or_else(|| Tensor::zeros([1, image.channels(), h, w]));
    let values = (0..h * w)
        .map(|p| {
            let guided: f64 = (0..image.channels()).map(|ch| dx.data()[ch * h * w + p]).sum();
            (cam[p] * guided).max(0.0)
        })
        .collect();
    Ok(SaliencyMap { height: h, width: w, values, target_class })
}

/// Fraction of attribution mass falling inside `mask` (row-major, same
/// size as the map).
pub fn nucleus_focus_score(map: &SaliencyMap, mask: &[bool]) -> Result<f64> {
    if mask.len() != map.values.len() {
        return Err(Error::Shape(format!("mask has {} pixels, map {}", mask.len(), map.values.len())));
    }
    let peak = map.values.iter().copied().fold(0.0f64, f64::max);
    if !(peak > 0.0) {
        return Err(Error::Degenerate("saliency map has zero total mass; focus score undefined".into()));
    }
    // scaling by the peak makes sums over uniform maps exact
    let (mut inside, mut total) = (0.0, 0.0);
    for (&v, &m) in map.values.iter().zip(mask) {
        let v = v / peak;
        total += v;
        if m {
            inside += v;
        }
    }
    Ok(inside / total)
}
