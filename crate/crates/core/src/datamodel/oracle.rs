use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{GroundTruth, Nucleus};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Sub-pixel samples per axis used for nucleus coverage.
pub const COVERAGE_GRID: usize = 4;

/// Fixed, maximally separated RGB colors for typed masks (one per type).
pub const TYPE_PALETTE: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// One channel, 1 on nuclei.
    Binary,
    /// Three channels, nucleus pixels painted with their type's palette color.
    Typed,
    /// The primary image with every non-nucleus pixel set to 0.
    MaskedImage,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::Binary => "binary",
            MaskMode::Typed => "typed",
            MaskMode::MaskedImage => "masked_image",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            MaskMode::Binary => 1,
            MaskMode::Typed | MaskMode::MaskedImage => 3,
        }
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(MaskMode::Binary),
            "typed" => Ok(MaskMode::Typed),
            "masked_image" => Ok(MaskMode::MaskedImage),
            other => Err(Error::Config(format!("unknown mask mode {other:?}"))),
        }
    }
}

/// Per-pixel nucleus ownership: 0 for background, `k + 1` for nucleus `k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub owner: Vec<u32>,
}

impl InstanceMap {
    pub fn foreground(&self) -> impl Iterator<Item = bool> + '_ {
        self.owner.iter().map(|&o| o > 0)
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground().filter(|&f| f).count() as f64 / self.owner.len() as f64
    }
}

/// Number of the `COVERAGE_GRID^2` sub-pixel samples of pixel `(px, py)`
/// that fall inside the nucleus.
pub fn nucleus_covers(n: &Nucleus, px: usize, py: usize) -> usize {
    let (sin, cos) = n.angle.sin_cos();
    let mut inside = 0;
    for sy in 0..COVERAGE_GRID {
        for sx in 0..COVERAGE_GRID {
            let x = px as f64 + (sx as f64 + 0.5) / COVERAGE_GRID as f64;
            let y = py as f64 + (sy as f64 + 0.5) / COVERAGE_GRID as f64;
            let (dx, dy) = (x - n.center[0], y - n.center[1]);
            let u = dx * cos + dy * sin;
            let v = -dx * sin + dy * cos;
            if (u / n.radii[0]).powi(2) + (v / n.radii[1]).powi(2) <= 1.0 {
                inside += 1;
            }
        }
    }
    inside
}

/// Pixel bounding box `(x0, x1, y0, y1)` (exclusive ends) of a nucleus,
/// clipped to the image.
pub(crate) fn bounding_box(n: &Nucleus, height: usize, width: usize) -> (usize, usize, usize, usize) {
    let r = n.radii[0].max(n.radii[1]);
    let clip = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
    (
        clip((n.center[0] - r).floor(), width),
        clip((n.center[0] + r).ceil() + 1.0, width),
        clip((n.center[1] - r).floor(), height),
        clip((n.center[1] + r).ceil() + 1.0, height),
    )
}

/// Rasterizes the nucleus set: a pixel belongs to a nucleus when at least
/// half of its sub-pixel samples are inside; later nuclei overwrite earlier.
pub fn rasterize(truth: &GroundTruth) -> InstanceMap {
    let (h, w) = (truth.height, truth.width);
    let mut owner = vec![0u32; h * w];
    let half = COVERAGE_GRID * COVERAGE_GRID / 2;
    for (k, n) in truth.nuclei.iter().enumerate() {
        let (x0, x1, y0, y1) = bounding_box(n, h, w);
        for py in y0..y1 {
            for px in x0..x1 {
                if nucleus_covers(n, px, py) >= half {
                    owner[py * w + px] = k as u32 + 1;
                }
            }
        }
    }
    InstanceMap { height: h, width: w, owner }
}

/// Segmentation oracle: renders the ground-truth nuclei of `primary` as a
/// privileged view.
pub fn oracle_mask(primary: &ImageTensor, truth: &GroundTruth, mode: MaskMode) -> Result<ImageTensor> {
    if primary.height() != truth.height || primary.width() != truth.width {
        return Err(Error::Shape(format!(
            "ground truth {}x{} for image {}x{}",
            truth.height,
            truth.width,
            primary.height(),
            primary.width()
        )));
    }
    let map = rasterize(truth);
    let (h, w) = (truth.height, truth.width);
    let data = match mode {
        MaskMode::Binary => map.foreground().map(|f| if f { 1.0 } else { 0.0 }).collect(),
        MaskMode::Typed => {
            let mut out = vec![0.0f32; h * w * 3];
            for (p, &o) in map.owner.iter().enumerate() {
                if o > 0 {
                    let kind = truth.nuclei[o as usize - 1].kind;
                    let color = TYPE_PALETTE
                        .get(kind)
                        .ok_or_else(|| Error::Config(format!("nucleus type {kind} has no palette color")))?;
                    out[p * 3..p * 3 + 3].copy_from_slice(color);
                }
            }
            out
        }
        MaskMode::MaskedImage => {
            if primary.channels() != 3 {
                return Err(Error::Image("masked_image mode needs an RGB primary".into()));
            }
            let mut out = primary.data().to_vec();
            for (p, f) in map.foreground().enumerate() {
                if !f {
                    out[p * 3..p * 3 + 3].fill(0.0);
                }
            }
            out
        }
    };
    ImageTensor::new(h, w, mode.channels(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn truth(nuclei: Vec<Nucleus>) -> GroundTruth {
        GroundTruth { id: "t".into(), height: 16, width: 16, nuclei }
    }

    #[test]
    fn zero_nuclei_give_empty_masks() {
        let img = ImageTensor::filled(16, 16, 3, 0.7).unwrap();
        let t = truth(vec![]);
        for mode in [MaskMode::Binary, MaskMode::Typed, MaskMode::MaskedImage] {
            let m = oracle_mask(&img, &t, mode).unwrap();
            assert_eq!(m.channels(), mode.channels());
            assert!(m.data().iter().all(|&v| v == 0.0), "{mode:?}");
        }
    }

    #[test]
    fn axis_aligned_square_coverage() {
        // A circle of radius 2 centred on a pixel corner covers the 4 pixels
        // around the centre completely.
        let n = Nucleus { center: [8.0, 8.0], radii: [2.0, 2.0], angle: 0.0, kind: 0 };
        for (x, y) in [(7, 7), (8, 7), (7, 8), (8, 8)] {
            assert_eq!(nucleus_covers(&n, x, y), 16);
        }
        assert_eq!(nucleus_covers(&n, 2, 2), 0);
    }

    #[test]
    fn typed_mask_uses_palette() {
        let img = ImageTensor::filled(16, 16, 3, 0.5).unwrap();
        let t = truth(vec![Nucleus { center: [8.0, 8.0], radii: [3.0, 2.0], angle: 0.3, kind: 2 }]);
        let m = oracle_mask(&img, &t, MaskMode::Typed).unwrap();
        assert_eq!(&m.data()[(8 * 16 + 8) * 3..][..3], &TYPE_PALETTE[2]);
    }

    #[test]
    fn unknown_mode_is_rejected() {
        assert!("outline".parse::<MaskMode>().is_err());
        assert_eq!("masked_image".parse::<MaskMode>().unwrap(), MaskMode::MaskedImage);
    }
}
