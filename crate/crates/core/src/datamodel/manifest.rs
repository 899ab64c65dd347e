use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GroundTruth, Sample, Split};
use crate::error::{io_err, Error, Result};
use crate::image::ImageTensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const DATASET_META_FILE: &str = "dataset.json";
const HEADER: [&str; 5] = ["id", "primary_path", "privileged_path", "label", "split"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative to the manifest directory.
    pub primary_path: PathBuf,
    pub privileged_path: Option<PathBuf>,
    pub label: usize,
    pub split: Split,
}

/// A dataset on disk: records plus class names and modality descriptors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub class_names: Vec<String>,
    pub primary_modality: String,
    pub privileged_modality: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    class_names: Vec<String>,
    primary_modality: String,
    privileged_modality: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    id: String,
    primary_path: String,
    privileged_path: String,
    label: String,
    split: String,
}

impl DatasetManifest {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn has_privileged(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.privileged_path.is_some())
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    pub fn truth_path(&self, id: &str) -> PathBuf {
        self.root.join(format!("{id}.gt.json"))
    }

    pub fn load_truth(&self, id: &str) -> Result<GroundTruth> {
        let path = self.truth_path(id);
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn load_sample(&self, record: &ManifestRecord) -> Result<Sample> {
        let primary = ImageTensor::load_png(&self.resolve(&record.primary_path))?;
        let privileged = match &record.privileged_path {
            Some(p) => Some(ImageTensor::load_png(&self.resolve(p))?),
            None => None,
        };
        Sample::new(record.id.clone(), primary, privileged, record.label, record.split)
    }

    pub fn load_samples(&self, split: Split) -> Result<Vec<Sample>> {
        self.records_in(split).map(|r| self.load_sample(r)).collect()
    }

    /// Checks id uniqueness, labels, and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if r.label >= self.class_count() {
                return Err(Error::Config(format!(
                    "record {} has label {} but only {} classes",
                    r.id,
                    r.label,
                    self.class_count()
                )));
            }
            for p in std::iter::once(&r.primary_path).chain(r.privileged_path.as_ref()) {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::MissingFile(full));
                }
            }
        }
        Ok(())
    }
}

/// Writes `manifest.csv`-style records to `path` and the class/modality
/// metadata next to it.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut w = csv::Writer::from_path(path)?;
    for r in &manifest.records {
        w.serialize(Row {
            id: r.id.clone(),
            primary_path: path_str(&r.primary_path),
            privileged_path: r.privileged_path.as_deref().map(path_str).unwrap_or_default(),
            label: r.label.to_string(),
            split: r.split.as_str().to_string(),
        })?;
    }
    if manifest.records.is_empty() {
        w.write_record(HEADER)?;
    }
    w.flush().map_err(io_err(path))?;
    let meta = DatasetMeta {
        class_names: manifest.class_names.clone(),
        primary_modality: manifest.primary_modality.clone(),
        privileged_modality: manifest.privileged_modality.clone(),
    };
    let meta_path = dir.join(DATASET_META_FILE);
    fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(io_err(&meta_path))?;
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.to_string_lossy().replace('\\', "/")
}

/// Reads a manifest and validates it against the files on disk.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let root = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != HEADER {
        return Err(Error::MalformedRow { row: 0, reason: format!("header {header:?}, expected {HEADER:?}") });
    }
    let mut records = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let line = i + 1;
        let row = row.map_err(|e| Error::MalformedRow { row: line, reason: e.to_string() })?;
        if row.id.is_empty() || row.primary_path.is_empty() {
            return Err(Error::MalformedRow { row: line, reason: "empty id or primary_path".into() });
        }
        let label = row
            .label
            .parse()
            .map_err(|_| Error::MalformedRow { row: line, reason: format!("label {:?}", row.label) })?;
        let split = row
            .split
            .parse()
            .map_err(|_| Error::MalformedRow { row: line, reason: format!("split {:?}", row.split) })?;
        records.push(ManifestRecord {
            id: row.id,
            primary_path: row.primary_path.into(),
            privileged_path: (!row.privileged_path.is_empty()).then(|| row.privileged_path.into()),
            label,
            split,
        });
    }
    let meta_path = root.join(DATASET_META_FILE);
    let manifest = if meta_path.is_file() {
        let bytes = fs::read(&meta_path).map_err(io_err(&meta_path))?;
        let meta: DatasetMeta = serde_json::from_slice(&bytes)?;
        DatasetManifest {
            root,
            records,
            class_names: meta.class_names,
            primary_modality: meta.primary_modality,
            privileged_modality: meta.privileged_modality,
        }
    } else {
        let classes = records.iter().map(|r| r.label + 1).max().unwrap_or(0);
        DatasetManifest {
            root,
            records,
            class_names: (0..classes).map(|k| format!("class{k}")).collect(),
            primary_modality: "unknown".into(),
            privileged_modality: None,
        }
    };
    manifest.validate()?;
    Ok(manifest)
}
