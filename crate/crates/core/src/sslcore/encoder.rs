use privdistil_nn::{kaiming_uniform, Graph, ParamStore, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// How parameters are placed on a graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    Trainable,
    Frozen,
}

impl Binding {
    pub(crate) fn bind<T: Scalar>(self, g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Var {
        match self {
            Binding::Trainable => store.bind(g, name),
            Binding::Frozen => store.bind_frozen(g, name),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderPreset {
    /// Strided 3x3 conv stages with group normalization.
    SmallCnn,
    /// Bottleneck residual stages laid out as ResNet-50 (3, 4, 6, 3 blocks,
    /// 2048 output channels).
    Resnet50,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub preset: EncoderPreset,
    pub in_channels: usize,
    pub image_size: usize,
    /// Output channels of each stage.
    pub stage_widths: Vec<usize>,
    /// Conv units (small_cnn) or bottleneck blocks (resnet50) per stage.
    pub blocks_per_stage: Vec<usize>,
    /// Representation width.
    pub embed_dim: usize,
}

impl EncoderConfig {
    /// Desk-scale default: four strided stages and a 128-wide representation.
    pub fn small_cnn(in_channels: usize, image_size: usize) -> Self {
        Self {
            preset: EncoderPreset::SmallCnn,
            in_channels,
            image_size,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: vec![1, 1, 1, 1],
            embed_dim: 128,
        }
    }

    pub fn resnet50(in_channels: usize, image_size: usize) -> Self {
        Self {
            preset: EncoderPreset::Resnet50,
            in_channels,
            image_size,
            stage_widths: vec![256, 512, 1024, 2048],
            blocks_per_stage: vec![3, 4, 6, 3],
            embed_dim: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.embed_dim < 8 {
            return bad(format!("embed_dim {} < 8", self.embed_dim));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            return bad(format!("in_channels {}", self.in_channels));
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return bad("stage_widths and blocks_per_stage must be non-empty and of equal length".into());
        }
        if self.stage_widths.contains(&0) || self.blocks_per_stage.contains(&0) {
            return bad("zero-sized stage".into());
        }
        let downsample = 1usize << (self.stage_widths.len() + usize::from(self.preset == EncoderPreset::Resnet50));
        if self.image_size < downsample {
            return bad(format!("image_size {} too small for {} stages", self.image_size, self.stage_widths.len()));
        }
        if self.preset == EncoderPreset::Resnet50 {
            if self.embed_dim != 2048 {
                return bad(format!("resnet50 implies embed_dim 2048, got {}", self.embed_dim));
            }
            if self.stage_widths.iter().any(|w| w % 4 != 0) {
                return bad("resnet50 stage widths must be divisible by 4".into());
            }
        }
        Ok(())
    }
}

const NORM_EPS: f64 = 1e-5;

fn groups_for(channels: usize) -> usize {
    [8, 4, 2].into_iter().find(|g| channels.is_multiple_of(*g) && channels / g >= 2).unwrap_or(1)
}

/// Convolutional backbone: image batch `[N, C, H, W]` to `[N, embed_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(config: EncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, prefix: prefix.into() })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    fn init_conv(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore<f32>, name: &str, cin: usize, cout: usize, k: usize) {
        store.insert(self.name(&format!("{name}.w")), kaiming_uniform(rng, &[cout, cin, k, k], cin * k * k));
    }

    fn init_norm(&self, store: &mut ParamStore<f32>, name: &str, c: usize) {
        store.insert(self.name(&format!("{name}.gamma")), Tensor::ones([c]));
        store.insert(self.name(&format!("{name}.beta")), Tensor::zeros([c]));
    }

    /// Adds freshly initialized parameters to `store`.
    pub fn init(&self, rng: &mut ChaCha8Rng, store: &mut ParamStore<f32>) {
        let cfg = &self.config;
        let mut cin = cfg.in_channels;
        match cfg.preset {
            EncoderPreset::SmallCnn => {
                for (s, (&w, &blocks)) in cfg.stage_widths.iter().zip(&cfg.blocks_per_stage).enumerate() {
                    for b in 0..blocks {
                        let unit = format!("stage{s}.conv{b}");
                        self.init_conv(rng, store, &unit, cin, w, 3);
                        self.init_norm(store, &format!("{unit}.norm"), w);
                        cin = w;
                    }
                }
            }
            EncoderPreset::Resnet50 => {
                self.init_conv(rng, store, "stem.conv", cin, 64, 7);
                self.init_norm(store, "stem.norm", 64);
                cin = 64;
                for (s, (&w, &blocks)) in cfg.stage_widths.iter().zip(&cfg.blocks_per_stage).enumerate() {
                    let mid = w / 4;
                    for b in 0..blocks {
                        let unit = format!("stage{s}.block{b}");
                        self.init_conv(rng, store, &format!("{unit}.conv1"), cin, mid, 1);
                        self.init_norm(store, &format!("{unit}.norm1"), mid);
                        self.init_conv(rng, store, &format!("{unit}.conv2"), mid, mid, 3);
                        self.init_norm(store, &format!("{unit}.norm2"), mid);
                        self.init_conv(rng, store, &format!("{unit}.conv3"), mid, w, 1);
                        self.init_norm(store, &format!("{unit}.norm3"), w);
                        if b == 0 {
                            self.init_conv(rng, store, &format!("{unit}.shortcut"), cin, w, 1);
                            self.init_norm(store, &format!("{unit}.shortcut_norm"), w);
                        }
                        cin = w;
                    }
                }
            }
        }
        store.insert(self.name("fc.w"), kaiming_uniform(rng, &[cin, cfg.embed_dim], cin));
        store.insert(self.name("fc.b"), Tensor::zeros([cfg.embed_dim]));
    }

    fn conv_norm<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bind: Binding,
        x: Var,
        conv: &str,
        norm: &str,
        stride: usize,
    ) -> Var {
        let w = bind.bind(g, store, &self.name(&format!("{conv}.w")));
        let k = g.shape(w)[2];
        let y = g.conv2d(x, w, None, stride, k / 2);
        let c = g.shape(y)[1];
        let gamma = bind.bind(g, store, &self.name(&format!("{norm}.gamma")));
        let beta = bind.bind(g, store, &self.name(&format!("{norm}.beta")));
        g.group_norm(y, gamma, beta, groups_for(c), T::from_f64_lossy(NORM_EPS))
    }

    /// Output of the last convolutional stage, `[N, C_last, h, w]`.
    pub fn features<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Binding, x: Var) -> Var {
        let cfg = &self.config;
        let mut h = x;
        match cfg.preset {
            EncoderPreset::SmallCnn => {
                for (s, &blocks) in cfg.blocks_per_stage.iter().enumerate() {
                    for b in 0..blocks {
                        let unit = format!("stage{s}.conv{b}");
                        let y = self.conv_norm(g, store, bind, h, &unit, &format!("{unit}.norm"), if b == 0 { 2 } else { 1 });
                        h = g.relu(y);
                    }
                }
            }
            EncoderPreset::Resnet50 => {
                let y = self.conv_norm(g, store, bind, h, "stem.conv", "stem.norm", 2);
                h = g.relu(y);
                for (s, &blocks) in cfg.blocks_per_stage.iter().enumerate() {
                    for b in 0..blocks {
                        let unit = format!("stage{s}.block{b}");
                        let stride = if b == 0 && s > 0 { 2 } else { 1 };
                        let y = self.conv_norm(g, store, bind, h, &format!("{unit}.conv1"), &format!("{unit}.norm1"), 1);
                        let y = g.relu(y);
                        let y = self.conv_norm(g, store, bind, y, &format!("{unit}.conv2"), &format!("{unit}.norm2"), stride);
                        let y = g.relu(y);
                        let y = self.conv_norm(g, store, bind, y, &format!("{unit}.conv3"), &format!("{unit}.norm3"), 1);
                        let skip = if b == 0 {
                            self.conv_norm(g, store, bind, h, &format!("{unit}.shortcut"), &format!("{unit}.shortcut_norm"), stride)
                        } else {
                            h
                        };
                        let sum = g.add(y, skip);
                        h = g.relu(sum);
                    }
                }
            }
        }
        h
    }

    /// Pooled features through the final linear layer.
    pub fn head<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Binding, features: Var) -> Var {
        let pooled = g.global_avg_pool(features);
        let w = bind.bind(g, store, &self.name("fc.w"));
        let b = bind.bind(g, store, &self.name("fc.b"));
        g.linear(pooled, w, Some(b))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bind: Binding, x: Var) -> Var {
        let f = self.features(g, store, bind, x);
        self.head(g, store, bind, f)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let cfg = &self.config;
        match shape {
            [n, c, h, w] if *n > 0 && *c == cfg.in_channels && *h == cfg.image_size && *w == cfg.image_size => Ok(()),
            _ => Err(Error::Shape(format!(
                "encoder expects [N>0, {}, {}, {}], got {shape:?}",
                cfg.in_channels, cfg.image_size, cfg.image_size
            ))),
        }
    }

    /// Inference-mode representations `[N, embed_dim]`.
    pub fn encode<T: Scalar>(&self, store: &ParamStore<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut g = Graph::new();
        let x = g.input(batch.clone());
        let y = self.forward(&mut g, store, Binding::Frozen, x);
        Ok(g.value(y).clone())
    }

    /// Representations `[N, embed_dim]` for a list of images, evaluated in
    /// chunks of `chunk`.
    pub fn encode_images(&self, store: &ParamStore<f32>, images: &[&ImageTensor], chunk: usize) -> Result<Tensor<f32>> {
        if images.is_empty() {
            return Err(Error::Shape("no images to encode".into()));
        }
        let parts = images
            .chunks(chunk.max(1))
            .map(|c| self.encode(store, &ImageTensor::batch::<f32>(c)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::concat(&parts.iter().collect::<Vec<_>>()))
    }

    /// Parameter names this encoder reads.
    pub fn param_names(&self) -> Vec<String> {
        let mut store = ParamStore::new();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        self.init(&mut rng, &mut store);
        store.names().cloned().collect()
    }
}
