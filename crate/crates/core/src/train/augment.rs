use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{gaussian_blur, hsv_to_rgb, rgb_to_hsv};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Fraction of a full turn; 0.1 means up to 36 degrees either way.
    pub hue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    /// Range of the crop area as a fraction of the image.
    pub crop_scale: [f64; 2],
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub jitter: ColorJitter,
    pub jitter_p: f64,
    pub blur_p: f64,
    pub blur_sigma: [f64; 2],
    /// Whether the privileged image gets (spatial-only) augmentation.
    pub augment_privileged: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.4, 1.0],
            hflip_p: 0.5,
            vflip_p: 0.5,
            jitter: ColorJitter { brightness: 0.4, contrast: 0.4, saturation: 0.2, hue: 0.1 },
            jitter_p: 0.8,
            blur_p: 0.5,
            blur_sigma: [0.1, 2.0],
            augment_privileged: true,
        }
    }
}

impl AugmentationConfig {
    /// Every transform disabled.
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            hflip_p: 0.0,
            vflip_p: 0.0,
            jitter: ColorJitter { brightness: 0.0, contrast: 0.0, saturation: 0.0, hue: 0.0 },
            jitter_p: 0.0,
            blur_p: 0.0,
            blur_sigma: [0.0, 0.0],
            augment_privileged: false,
        }
    }

    /// Crops and flips only, as applied to privileged images.
    pub fn spatial_only(&self) -> Self {
        Self { jitter_p: 0.0, blur_p: 0.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("crop_scale {:?} must satisfy 0 < lo <= hi <= 1", self.crop_scale)));
        }
        if ![self.hflip_p, self.vflip_p, self.jitter_p, self.blur_p].into_iter().all(prob) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let j = self.jitter;
        if !(j.brightness >= 0.0 && j.contrast >= 0.0 && (0.0..=1.0).contains(&j.saturation) && (0.0..=0.5).contains(&j.hue)) {
            return Err(Error::Config(format!("invalid color jitter {j:?}")));
        }
        let [s0, s1] = self.blur_sigma;
        if !(s0 >= 0.0 && s0 <= s1) {
            return Err(Error::Config(format!("blur_sigma {:?}", self.blur_sigma)));
        }
        Ok(())
    }
}

fn bilinear_crop(data: &[f64], h: usize, w: usize, c: usize, top: f64, left: f64, ch: f64, cw: f64) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        let sy = (top + (y as f64 + 0.5) * ch / h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let (y0, fy) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..w {
            let sx = (left + (x as f64 + 0.5) * cw / w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (x0, fx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for k in 0..c {
                let p = |yy: usize, xx: usize| data[(yy * w + xx) * c + k];
                out[(y * w + x) * c + k] = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
            }
        }
    }
    out
}

fn flip(data: &mut [f64], h: usize, w: usize, c: usize, horizontal: bool) {
    let src = data.to_vec();
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if horizontal { (y, w - 1 - x) } else { (h - 1 - y, x) };
            data[(y * w + x) * c..(y * w + x + 1) * c].copy_from_slice(&src[(sy * w + sx) * c..(sy * w + sx + 1) * c]);
        }
    }
}

fn factor(rng: &mut ChaCha8Rng, strength: f64) -> f64 {
    if strength == 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
    }
}

fn jitter(data: &mut [f64], c: usize, j: &ColorJitter, rng: &mut ChaCha8Rng) {
    let b = factor(rng, j.brightness);
    for v in data.iter_mut() {
        *v *= b;
    }
    let k = factor(rng, j.contrast);
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    for v in data.iter_mut() {
        *v = mean + k * (*v - mean);
    }
    if c == 3 {
        let s = factor(rng, j.saturation);
        let hue = if j.hue == 0.0 { 0.0 } else { rng.random_range(-j.hue..=j.hue) * 360.0 };
        for px in data.chunks_mut(3) {
            let grey = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            for v in px.iter_mut() {
                *v = grey + s * (*v - grey);
            }
            if hue != 0.0 {
                let (hh, ss, vv) = rgb_to_hsv(px[0].clamp(0.0, 1.0), px[1].clamp(0.0, 1.0), px[2].clamp(0.0, 1.0));
                let (r, g, bb) = hsv_to_rgb(hh + hue, ss, vv);
                px.copy_from_slice(&[r, g, bb]);
            }
        }
    }
}

/// Random resized crop, flips, color jitter and blur, in that order. All
/// randomness comes from `rng`.
pub fn augment(img: &ImageTensor, cfg: &AugmentationConfig, rng: &mut ChaCha8Rng) -> ImageTensor {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let mut touched = false;
    let [lo, hi] = cfg.crop_scale;
    if lo < 1.0 {
        let side = rng.random_range(lo..=hi).sqrt();
        let (ch, cw) = (side * h as f64, side * w as f64);
        let top = rng.random_range(0.0..=h as f64 - ch);
        let left = rng.random_range(0.0..=w as f64 - cw);
        data = bilinear_crop(&data, h, w, c, top, left, ch, cw);
        touched = true;
    }
    for (p, horizontal) in [(cfg.hflip_p, true), (cfg.vflip_p, false)] {
        if p > 0.0 && rng.random_bool(p) {
            flip(&mut data, h, w, c, horizontal);
            touched = true;
        }
    }
    if cfg.jitter_p > 0.0 && rng.random_bool(cfg.jitter_p) {
        jitter(&mut data, c, &cfg.jitter, rng);
        touched = true;
    }
    if cfg.blur_p > 0.0 && rng.random_bool(cfg.blur_p) {
        let sigma = rng.random_range(cfg.blur_sigma[0]..=cfg.blur_sigma[1]);
        if sigma > 0.0 {
            data = gaussian_blur(&data, h, w, c, sigma);
            touched = true;
        }
    }
    if !touched {
        return img.clone();
    }
    ImageTensor::from_clipped(h, w, c, data.into_iter().map(|v| v as f32).collect())
        .expect("augmentation preserves image geometry")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn ramp(c: usize) -> ImageTensor {
        let data = (0..20 * 16 * c).map(|i| ((i * 13) % 97) as f32 / 96.0).collect();
        ImageTensor::new(20, 16, c, data).unwrap()
    }

    #[test]
    fn identity_config_is_identity() {
        let img = ramp(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &AugmentationConfig::identity(), &mut rng), img);
    }

    #[test]
    fn same_state_same_output() {
        let img = ramp(3);
        let cfg = AugmentationConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!((a.height(), a.width(), a.channels()), (20, 16, 3));
    }

    #[test]
    fn double_flip_is_identity() {
        let img = ramp(1);
        let cfg = AugmentationConfig { hflip_p: 1.0, vflip_p: 1.0, ..AugmentationConfig::identity() };
        let once = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_ne!(once, img);
        let twice = augment(&once, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(twice, img);
    }

    #[test]
    fn full_crop_is_exact() {
        let img = ramp(3);
        let out = bilinear_crop(
            &img.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
            20,
            16,
            3,
            0.0,
            0.0,
            20.0,
            16.0,
        );
        assert!(out.iter().zip(img.data()).all(|(a, &b)| (a - b as f64).abs() < 1e-12));
    }

    #[test]
    fn validation() {
        assert!(AugmentationConfig::default().validate().is_ok());
        assert!(AugmentationConfig { hflip_p: 1.5, ..Default::default() }.validate().is_err());
        assert!(AugmentationConfig { crop_scale: [0.0, 1.0], ..Default::default() }.validate().is_err());
        assert!(AugmentationConfig::default().spatial_only().validate().is_ok());
    }
}
