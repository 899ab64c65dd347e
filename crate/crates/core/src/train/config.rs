use serde::{Deserialize, Serialize};

use super::AugmentationConfig;
use crate::error::{Error, Result};
use crate::sslcore::{EncoderConfig, LossKind, MethodKind, ProjectorConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, weight_decay: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub method: MethodKind,
    pub loss: LossKind,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    /// Primary encoder; the privileged encoder copies it with the privileged
    /// channel count.
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub projector: ProjectorConfig,
    pub seed: u64,
}

impl TrainConfig {
    /// Long-schedule defaults: 100 epochs, warmup 10, peak lr 1e-4.
    pub fn new(method: MethodKind, loss: LossKind, encoder: EncoderConfig) -> Self {
        Self {
            method,
            loss,
            epochs: 100,
            peak_lr: 1e-4,
            warmup_epochs: 10,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            augmentation: AugmentationConfig::default(),
            encoder,
            projector: ProjectorConfig::default(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size {} < 2", self.batch_size)));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!("peak_lr {}", self.peak_lr)));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("optimizer {o:?}")));
        }
        self.loss.validate()?;
        self.augmentation.validate()?;
        self.encoder.validate()?;
        if self.method != MethodKind::Supervised {
            self.projector.validate(self.encoder.embed_dim)?;
        }
        Ok(())
    }

    pub fn privileged_encoder(&self, channels: usize) -> EncoderConfig {
        EncoderConfig { in_channels: channels, ..self.encoder.clone() }
    }
}
