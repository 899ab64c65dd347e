use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslatorMode {
    Paired,
    Unpaired,
}

impl TranslatorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TranslatorMode::Paired => "paired",
            TranslatorMode::Unpaired => "unpaired",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateConfig {
    /// Channels at the bottleneck; the two finer scales use half and a
    /// quarter of it.
    pub width: usize,
    pub down_stages: usize,
    pub residual_blocks: usize,
    /// Channels of the first discriminator layer.
    pub disc_width: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Paired L1 reconstruction weight.
    pub lambda_rec: f64,
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    pub lambda_adv: f64,
    /// Paired mode only; unpaired mode is always adversarial.
    pub adversarial: bool,
    /// Fraction of paired data held out for the reconstruction MAE.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for TranslateConfig {
    fn default() -> Self {
        Self {
            width: 32,
            down_stages: 3,
            residual_blocks: 3,
            disc_width: 16,
            learning_rate: 4e-3,
            steps: 1000,
            batch_size: 16,
            lambda_rec: 100.0,
            lambda_cyc: 10.0,
            lambda_id: 5.0,
            lambda_adv: 1.0,
            adversarial: false,
            holdout_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TranslateConfig {
    pub fn validate(&self, mode: TranslatorMode) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("translator: {m}")));
        if self.width < 4 || !self.width.is_multiple_of(4) {
            return bad(format!("width {} must be a positive multiple of 4", self.width));
        }
        if self.down_stages == 0 || self.down_stages > 6 {
            return bad(format!("down_stages {} outside 1..=6", self.down_stages));
        }
        if self.disc_width == 0 {
            return bad("disc_width must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate {}", self.learning_rate));
        }
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_cyc", self.lambda_cyc),
            ("lambda_id", self.lambda_id),
            ("lambda_adv", self.lambda_adv),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and >= 0"));
            }
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction {} outside (0, 1)", self.holdout_fraction));
        }
        match mode {
            TranslatorMode::Paired => {
                if self.lambda_rec == 0.0 && !(self.adversarial && self.lambda_adv > 0.0) {
                    return bad("paired mode with no active loss".into());
                }
            }
            TranslatorMode::Unpaired => {
                if self.lambda_cyc <= 0.0 {
                    return bad("unpaired mode needs lambda_cyc > 0".into());
                }
                if self.lambda_adv <= 0.0 {
                    return bad("unpaired mode needs lambda_adv > 0".into());
                }
            }
        }
        Ok(())
    }

    /// Images must halve cleanly at every down stage.
    pub fn check_image_size(&self, height: usize, width: usize) -> Result<()> {
        let f = 1usize << self.down_stages;
        if !height.is_multiple_of(f) || !width.is_multiple_of(f) || height < f || width < f {
            return Err(Error::Shape(format!(
                "image {height}x{width} not divisible by {f} ({} down stages)",
                self.down_stages
            )));
        }
        Ok(())
    }
}
