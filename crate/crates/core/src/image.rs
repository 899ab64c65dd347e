//! Image container and 8-bit PNG storage.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use privdistil_nn::{Scalar, Tensor};

use crate::error::{io_err, Error, Result};

pub const MIN_SIDE: usize = 16;

/// `H x W x C` intensities in `[0, 1]`, with `C` either 1 (mask) or 3 (RGB).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::Image(format!("{height}x{width} is below the {MIN_SIDE}px minimum")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("{channels} channels (expected 1 or 3)")));
        }
        if data.len() != height * width * channels {
            return Err(Error::Image(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Image(format!("value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Builds an image, clipping every value into `[0, 1]`.
    pub fn from_clipped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_size(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Planar `[C, H, W]` copy for the networks.
    pub fn to_chw<T: Scalar>(&self) -> Vec<T> {
        let plane = self.height * self.width;
        let mut out = vec![T::zero(); plane * self.channels];
        for (p, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + p] = T::from_f64_lossy(v as f64);
            }
        }
        out
    }

    /// Inverse of [`ImageTensor::to_chw`], clipping into `[0, 1]`.
    pub fn from_chw<T: Scalar>(height: usize, width: usize, channels: usize, chw: &[T]) -> Result<Self> {
        let plane = height * width;
        if chw.len() != plane * channels {
            return Err(Error::Shape(format!("{} planar values for {height}x{width}x{channels}", chw.len())));
        }
        let mut data = vec![0.0f32; chw.len()];
        for c in 0..channels {
            for p in 0..plane {
                data[p * channels + c] = chw[c * plane + p].as_f64() as f32;
            }
        }
        Self::from_clipped(height, width, channels, data)
    }

    /// Stacks images into an `[N, C, H, W]` batch.
    pub fn batch<T: Scalar>(images: &[&ImageTensor]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let (h, w, c) = (first.height, first.width, first.channels);
        let mut data = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            if img.height != h || img.width != w || img.channels != c {
                return Err(Error::Shape(format!(
                    "batch mixes {h}x{w}x{c} with {}x{}x{}",
                    img.height, img.width, img.channels
                )));
            }
            data.extend(img.to_chw::<T>());
        }
        Ok(Tensor::new([images.len(), c, h, w], data))
    }

    /// Mean absolute difference over all values.
    pub fn mae(&self, other: &ImageTensor) -> Result<f64> {
        if self.height != other.height || self.width != other.width || self.channels != other.channels {
            return Err(Error::Shape("mae of differently shaped images".into()));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        Ok(s / self.data.len() as f64)
    }

    /// Values rounded to the 8-bit grid that PNG storage keeps.
    pub fn quantized(&self) -> ImageTensor {
        ImageTensor {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(if self.channels == 1 { png::ColorType::Grayscale } else { png::ColorType::Rgb });
        enc.set_depth(png::BitDepth::Eight);
        let png_err = |e: png::EncodingError| Error::Png { path: path.to_path_buf(), reason: e.to_string() };
        let mut writer = enc.write_header().map_err(png_err)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        writer.write_image_data(&bytes).map_err(png_err)?;
        writer.finish().map_err(png_err)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(io_err(path))?;
        let png_err = |e: png::DecodingError| Error::Png { path: path.to_path_buf(), reason: e.to_string() };
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::normalize_to_color8());
        let mut reader = dec.read_info().map_err(png_err)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::Png { path: path.to_path_buf(), reason: "image too large".into() })?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(png_err)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let bytes = &buf[..info.buffer_size()];
        let (channels, data): (usize, Vec<f32>) = match info.color_type {
            png::ColorType::Grayscale => (1, bytes.iter().map(|&b| b as f32 / 255.0).collect()),
            png::ColorType::GrayscaleAlpha => (1, bytes.chunks(2).map(|p| p[0] as f32 / 255.0).collect()),
            png::ColorType::Rgb => (3, bytes.iter().map(|&b| b as f32 / 255.0).collect()),
            png::ColorType::Rgba => {
                (3, bytes.chunks(4).flat_map(|p| p[..3].iter().map(|&b| b as f32 / 255.0)).collect())
            }
            other => {
                return Err(Error::Png { path: path.to_path_buf(), reason: format!("unsupported color type {other:?}") })
            }
        };
        Self::new(h, w, channels, data)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_invalid_images() {
        assert!(ImageTensor::new(8, 16, 3, vec![0.0; 8 * 16 * 3]).is_err());
        assert!(ImageTensor::new(16, 16, 2, vec![0.0; 16 * 16 * 2]).is_err());
        assert!(ImageTensor::new(16, 16, 1, vec![1.5; 256]).is_err());
        assert!(ImageTensor::new(16, 16, 1, vec![0.5; 255]).is_err());
    }

    #[test]
    fn chw_round_trip() {
        let data: Vec<f32> = (0..16 * 17 * 3).map(|i| (i % 256) as f32 / 255.0).collect();
        let img = ImageTensor::new(16, 17, 3, data).unwrap();
        let chw = img.to_chw::<f32>();
        assert_eq!(ImageTensor::from_chw(16, 17, 3, &chw).unwrap(), img);
    }

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..20 * 16 * 3).map(|i| ((i * 7) % 256) as f32 / 255.0).collect();
        let img = ImageTensor::new(20, 16, 3, data).unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load_png(&path).unwrap();
        assert_eq!(back, img.quantized());
        let mask = ImageTensor::filled(16, 16, 1, 1.0).unwrap();
        mask.save_png(&path).unwrap();
        assert_eq!(ImageTensor::load_png(&path).unwrap(), mask);
    }
}
