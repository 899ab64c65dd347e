//! Procedural histology-like data, ground-truth nuclei, masks, distribution
//! shifts, and the on-disk dataset manifest.

mod manifest;
mod oracle;
mod procgen;
mod shift;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::image::ImageTensor;

pub use manifest::{load_manifest, save_manifest, DatasetManifest, ManifestRecord, DATASET_META_FILE, MANIFEST_FILE};
pub use oracle::{nucleus_covers, oracle_mask, rasterize, InstanceMap, MaskMode, COVERAGE_GRID, TYPE_PALETTE};
pub use procgen::{
    gen_procedural_dataset, generate_sample, BackgroundParams, ClassSpec, GeneratedSample, NucleusParams, ProcGenConfig,
    SplitCounts,
};
pub(crate) use shift::gaussian_blur;
pub use shift::{apply_domain_shift, hsv_to_rgb, rgb_to_hsv, ShiftParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One nucleus of the ground truth: an ellipse with a type index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Nucleus {
    /// `(x, y)` in pixel units; pixel `(i, j)` spans `[j, j+1) x [i, i+1)`.
    pub center: [f64; 2],
    /// Semi-axes along the rotated x and y directions.
    pub radii: [f64; 2],
    /// Rotation in radians.
    pub angle: f64,
    #[serde(rename = "type")]
    pub kind: usize,
}

/// Ground-truth nucleus set of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub nuclei: Vec<Nucleus>,
}

/// A primary image, its optional privileged view, and its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub primary: ImageTensor,
    pub privileged: Option<ImageTensor>,
    pub label: usize,
    pub split: Split,
    pub shift_tag: Option<String>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        primary: ImageTensor,
        privileged: Option<ImageTensor>,
        label: usize,
        split: Split,
    ) -> crate::Result<Self> {
        if let Some(p) = &privileged {
            if !p.same_size(&primary) {
                return Err(Error::Shape(format!(
                    "privileged {}x{} vs primary {}x{}",
                    p.height(),
                    p.width(),
                    primary.height(),
                    primary.width()
                )));
            }
        }
        Ok(Self { id: id.into(), primary, privileged, label, split, shift_tag: None })
    }

    /// Applies a photometric shift to the primary image. Label, id, and the
    /// privileged view are untouched.
    pub fn shifted(&self, params: &ShiftParams, tag: &str) -> crate::Result<Sample> {
        Ok(Sample {
            primary: apply_domain_shift(&self.primary, params)?,
            shift_tag: Some(tag.to_string()),
            ..self.clone()
        })
    }
}
