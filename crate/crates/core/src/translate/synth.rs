use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::training::{translate_batch, TranslatorParams};
use crate::datamodel::{oracle_mask, DatasetManifest, MaskMode};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Where privileged images come from.
#[derive(Debug, Clone, PartialEq)]
pub enum PairSource {
    /// Rendered from each sample's ground-truth nuclei.
    Oracle,
    Translator(Box<TranslatorParams>),
    /// A directory holding `<id>.png` (or `<id>.priv.png`) per record.
    Imported(PathBuf),
}

/// Additive Gaussian corruption of synthetic privileged images.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub sigma: f64,
    pub seed: u64,
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma` to every
/// value and clips back into `[0, 1]`.
pub fn corrupt_with_noise(img: &ImageTensor, sigma: f64, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let data = img.data().iter().map(|&v| v + normal.sample(rng) as f32).collect();
    ImageTensor::from_clipped(img.height(), img.width(), img.channels(), data)
}

pub const PRIVILEGED_SUFFIX: &str = "priv.png";

fn privileged_rel_path(primary: &Path, id: &str) -> PathBuf {
    let name = format!("{id}.{PRIVILEGED_SUFFIX}");
    match primary.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => dir.join(name),
        None => PathBuf::from(name),
    }
}

fn imported_image(dir: &Path, id: &str) -> Result<ImageTensor> {
    for name in [format!("{id}.png"), format!("{id}.{PRIVILEGED_SUFFIX}")] {
        let p = dir.join(name);
        if p.is_file() {
            return ImageTensor::load_png(&p);
        }
    }
    Err(Error::MissingFile(dir.join(format!("{id}.png"))))
}

/// [`synthesize_pairs_with`] without corruption.
pub fn synthesize_pairs(manifest: &DatasetManifest, source: &PairSource, mode: MaskMode) -> Result<DatasetManifest> {
    synthesize_pairs_with(manifest, source, mode, None)
}

/// Produces a privileged image for every record, writes it next to the
/// primary as `<id>.priv.png`, and returns the manifest with the privileged
/// column filled. Records keep their order, ids, labels and splits.
pub fn synthesize_pairs_with(
    manifest: &DatasetManifest,
    source: &PairSource,
    mode: MaskMode,
    noise: Option<NoiseSpec>,
) -> Result<DatasetManifest> {
    if manifest.records.is_empty() {
        return Err(Error::Degenerate("manifest has no records".into()));
    }
    if let PairSource::Translator(t) = source {
        if t.out_channels != mode.channels() {
            return Err(Error::Incompatible(format!(
                "translator emits {} channels but {} masks have {}",
                t.out_channels,
                mode.as_str(),
                mode.channels()
            )));
        }
    }
    if let PairSource::Imported(dir) = source {
        if !dir.is_dir() {
            return Err(Error::MissingFile(dir.clone()));
        }
    }
    let mut out = manifest.clone();
    const CHUNK: usize = 32;
    for (c, records) in out.records.chunks_mut(CHUNK).enumerate() {
        let primaries: Vec<ImageTensor> = records
            .iter()
            .map(|r| ImageTensor::load_png(&manifest.resolve(&r.primary_path)))
            .collect::<Result<_>>()?;
        let privileged: Vec<ImageTensor> = match source {
            PairSource::Oracle => records
                .iter()
                .zip(&primaries)
                .map(|(r, p)| oracle_mask(p, &manifest.load_truth(&r.id)?, mode))
                .collect::<Result<_>>()?,
            PairSource::Translator(t) => translate_batch(t, &primaries.iter().collect::<Vec<_>>())?,
            PairSource::Imported(dir) => {
                let mut v = Vec::with_capacity(records.len());
                for (r, p) in records.iter().zip(&primaries) {
                    let img = imported_image(dir, &r.id)?;
                    if !img.same_size(p) || img.channels() != mode.channels() {
                        return Err(Error::Shape(format!(
                            "imported image for {} is {}x{}x{}, expected {}x{}x{}",
                            r.id,
                            img.height(),
                            img.width(),
                            img.channels(),
                            p.height(),
                            p.width(),
                            mode.channels()
                        )));
                    }
                    v.push(img);
                }
                v
            }
        };
        for (i, (r, img)) in records.iter_mut().zip(privileged).enumerate() {
            let img = match noise {
                Some(n) => {
                    // one stream per record position, independent of chunking
                    let pos = (c * CHUNK + i) as u64;
                    let mut rng = ChaCha8Rng::seed_from_u64(n.seed ^ pos.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    corrupt_with_noise(&img, n.sigma, &mut rng)?
                }
                None => img,
            };
            let rel = privileged_rel_path(&r.primary_path, &r.id);
            img.save_png(&manifest.resolve(&rel))?;
            r.privileged_path = Some(rel);
        }
    }
    let origin = match source {
        PairSource::Oracle => "oracle",
        PairSource::Translator(_) => "translator",
        PairSource::Imported(_) => "imported",
    };
    let mut tag = format!("{}-{origin}", mode.as_str());
    if let Some(n) = noise {
        tag.push_str(&format!("-noise{}", n.sigma));
    }
    out.privileged_modality = Some(tag);
    Ok(out)
}
