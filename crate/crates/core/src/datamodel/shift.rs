use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Photometric domain shift. The identity is `(0, 1, 1, 0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftParams {
    pub hue_degrees: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_sigma: f64,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl ShiftParams {
    pub const IDENTITY: ShiftParams = ShiftParams { hue_degrees: 0.0, brightness: 1.0, contrast: 1.0, blur_sigma: 0.0 };

    /// Scanner/centre-style shift used for out-of-distribution evaluation.
    pub const OOD_PRESET: ShiftParams = ShiftParams { hue_degrees: 25.0, brightness: 0.8, contrast: 1.2, blur_sigma: 0.8 };

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }
}

/// `(h, s, v)` with `h` in degrees `[0, 360)`.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - i - 1;
        }
    }
    i as usize
}

/// Separable Gaussian blur with reflected borders, on `H x W x C` data.
pub(crate) fn gaussian_blur(data: &[f64], h: usize, w: usize, c: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[(y * w + x) * c + ch] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * data[(y * w + reflect(x as isize + i as isize - r, w)) * c + ch])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[(reflect(y as isize + i as isize - r, h) * w + x) * c + ch])
                    .sum();
            }
        }
    }
    out
}

/// Hue rotation, brightness scaling, contrast about the mean, then blur;
/// the result is clipped to `[0, 1]`. Steps at their identity value are
/// skipped, so the identity shift returns the input bit for bit.
pub fn apply_domain_shift(img: &ImageTensor, p: &ShiftParams) -> Result<ImageTensor> {
    if p.hue_degrees != 0.0 && img.channels() != 3 {
        return Err(Error::Image("hue shift needs a 3-channel image".into()));
    }
    if !(p.brightness >= 0.0) || !(p.contrast >= 0.0) || !(p.blur_sigma >= 0.0) || !p.hue_degrees.is_finite() {
        return Err(Error::Config(format!("invalid shift parameters {p:?}")));
    }
    if p.is_identity() {
        return Ok(img.clone());
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut data: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    if p.hue_degrees != 0.0 {
        for px in data.chunks_mut(3) {
            let (hh, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb(hh + p.hue_degrees, s, v);
            px.copy_from_slice(&[r, g, b]);
        }
    }
    if p.brightness != 1.0 {
        for v in &mut data {
            *v *= p.brightness;
        }
    }
    if p.contrast != 1.0 {
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        for v in &mut data {
            *v = mean + p.contrast * (*v - mean);
        }
    }
    if p.blur_sigma > 0.0 {
        data = gaussian_blur(&data, h, w, c, p.blur_sigma);
    }
    ImageTensor::from_clipped(h, w, c, data.into_iter().map(|v| v as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_bitwise() {
        let data: Vec<f32> = (0..16 * 16 * 3).map(|i| ((i * 37) % 255) as f32 / 255.0).collect();
        let img = ImageTensor::new(16, 16, 3, data).unwrap();
        assert_eq!(apply_domain_shift(&img, &ShiftParams::IDENTITY).unwrap(), img);
    }

    #[test]
    fn brightness_clips() {
        let img = ImageTensor::filled(16, 16, 3, 0.6).unwrap();
        let p = ShiftParams { brightness: 2.0, ..ShiftParams::IDENTITY };
        let out = apply_domain_shift(&img, &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hue_on_mask_is_an_error_but_blur_is_not() {
        let img = ImageTensor::filled(16, 16, 1, 0.5).unwrap();
        assert!(apply_domain_shift(&img, &ShiftParams { hue_degrees: 10.0, ..ShiftParams::IDENTITY }).is_err());
        let out = apply_domain_shift(&img, &ShiftParams { blur_sigma: 1.0, ..ShiftParams::IDENTITY }).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-6));
    }

    #[test]
    fn zero_brightness_destroys_the_image() {
        let data: Vec<f32> = (0..16 * 16 * 3).map(|i| (i % 7) as f32 / 7.0).collect();
        let img = ImageTensor::new(16, 16, 3, data).unwrap();
        let out = apply_domain_shift(&img, &ShiftParams { brightness: 0.0, ..ShiftParams::OOD_PRESET }).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
