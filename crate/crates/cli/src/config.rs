//! Experiment configuration: one JSON document plus `PRIVDISTIL_*`
//! environment overrides, validated before any work starts.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use privdistil::datamodel::{MaskMode, ProcGenConfig, ShiftParams, SplitCounts, MANIFEST_FILE};
use privdistil::evalkit::ProbeConfig;
use privdistil::sslcore::{EncoderConfig, LossKind, MethodKind, ProjectorConfig};
use privdistil::train::{AugmentationConfig, OptimizerConfig, TrainConfig};
use privdistil::translate::{TranslateConfig, TranslatorMode};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const ENV_PREFIX: &str = "PRIVDISTIL_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Every training row runs once per seed.
    pub seeds: Vec<u64>,
    pub procgen: ProcgenSection,
    #[serde(default)]
    pub synthesize: Option<SynthSection>,
    #[serde(default)]
    pub translator: Option<TranslatorSection>,
    pub train: TrainSection,
    #[serde(default)]
    pub evaluate: EvalSection,
    pub report: ReportSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProcgenSection {
    pub out_dir: PathBuf,
    pub counts: SplitCounts,
    pub generator: ProcGenConfig,
}

impl ProcgenSection {
    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join(MANIFEST_FILE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Oracle,
    Translator,
    Imported,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Oracle => "oracle",
            SourceKind::Translator => "translator",
            SourceKind::Imported => "imported",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub source: SourceKind,
    pub mode: MaskMode,
    #[serde(default)]
    pub translator_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub imported_dir: Option<PathBuf>,
    /// Standard deviation of additive noise on the privileged images.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub noise_seed: u64,
    /// Paired manifest; defaults to `manifest.paired.csv` in the dataset
    /// directory.
    #[serde(default)]
    pub output_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslatorSection {
    pub mode: TranslatorMode,
    /// Target rendering the translator learns to produce.
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub config: TranslateConfig,
    pub checkpoint: PathBuf,
    /// Use at most this many training images.
    #[serde(default)]
    pub max_images: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub registry: PathBuf,
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub projector: ProjectorConfig,
    pub runs: Vec<RunRow>,
}

/// One method row of the experiment matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRow {
    pub run_id: String,
    pub method: MethodKind,
    pub loss: LossKind,
    /// Manifest to train on; defaults to the synthesized manifest for
    /// privileged methods and the procedural one otherwise.
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    /// Train on only the first N training records.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Label of the privileged source in reports.
    #[serde(default)]
    pub privileged_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "ood_preset")]
    pub shift: ShiftParams,
    /// Classes kept for the clustering task; all classes when absent.
    #[serde(default)]
    pub cluster_classes: Option<Vec<usize>>,
    #[serde(default = "default_saliency_samples")]
    pub saliency_samples: usize,
}

fn ood_preset() -> ShiftParams {
    ShiftParams::OOD_PRESET
}

fn default_saliency_samples() -> usize {
    8
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            shift: ShiftParams::OOD_PRESET,
            cluster_classes: None,
            saliency_samples: default_saliency_samples(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportSection {
    pub csv: PathBuf,
    pub markdown: PathBuf,
}

impl ExperimentConfig {
    /// Reads `path`, applies environment overrides, and validates.
    pub fn load(path: &Path, env: impl IntoIterator<Item = (String, String)>) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text, env)
    }

    pub fn from_json_str(text: &str, env: impl IntoIterator<Item = (String, String)>) -> CliResult<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config is not valid JSON: {e}")))?;
        let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (k, v) in overrides {
            apply_override(&mut value, &k, &v)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("config field {path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must list at least one seed".into()));
        }
        let mut seen = HashSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return Err(CliError::Config(format!("seed {s} listed twice")));
            }
        }
        self.procgen.generator.validate()?;
        if let Some(s) = &self.synthesize {
            if s.source == SourceKind::Translator && s.translator_checkpoint.is_none() {
                return Err(CliError::Config("synthesize.source = translator needs synthesize.translator_checkpoint".into()));
            }
            if s.source == SourceKind::Imported && s.imported_dir.is_none() {
                return Err(CliError::Config("synthesize.source = imported needs synthesize.imported_dir".into()));
            }
            if !(s.noise_sigma.is_finite() && s.noise_sigma >= 0.0) {
                return Err(CliError::Config(format!("synthesize.noise_sigma {}", s.noise_sigma)));
            }
        }
        if let Some(t) = &self.translator {
            t.config.validate(t.mode)?;
        }
        let mut ids = HashSet::new();
        for row in &self.train.runs {
            if row.run_id.is_empty() || !row.run_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(CliError::Config(format!("run id {:?} must be non-empty [A-Za-z0-9_-]", row.run_id)));
            }
            if !ids.insert(row.run_id.as_str()) {
                return Err(CliError::Config(format!("run id {:?} is not unique", row.run_id)));
            }
            if row.train_limit == Some(0) {
                return Err(CliError::Config(format!("run {}: train_limit must be positive", row.run_id)));
            }
            self.train_config(row, self.seeds[0])?.validate()?;
        }
        self.evaluate.probe.validate()?;
        if let Some(c) = &self.evaluate.cluster_classes {
            if c.len() < 2 || c.iter().any(|&k| k >= self.procgen.generator.class_count) {
                return Err(CliError::Config(format!("evaluate.cluster_classes {c:?}")));
            }
        }
        Ok(())
    }

    pub fn row(&self, run_id: &str) -> CliResult<&RunRow> {
        self.train
            .runs
            .iter()
            .find(|r| r.run_id == run_id)
            .ok_or_else(|| CliError::Config(format!("no run row with run_id {run_id:?}")))
    }

    pub fn train_config(&self, row: &RunRow, seed: u64) -> CliResult<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            method: row.method,
            loss: row.loss,
            epochs: t.epochs,
            peak_lr: t.peak_lr,
            warmup_epochs: t.warmup_epochs,
            batch_size: t.batch_size,
            optimizer: t.optimizer,
            augmentation: t.augmentation.clone(),
            encoder: t.encoder.clone(),
            projector: t.projector.clone(),
            seed,
        })
    }

    pub fn synth_manifest_path(&self) -> Option<PathBuf> {
        self.synthesize.as_ref().map(|s| {
            s.output_manifest.clone().unwrap_or_else(|| self.procgen.out_dir.join("manifest.paired.csv"))
        })
    }

    /// Manifest a run trains and evaluates on.
    pub fn manifest_for(&self, row: &RunRow) -> CliResult<PathBuf> {
        if let Some(m) = &row.manifest {
            return Ok(m.clone());
        }
        if row.method.needs_privileged() {
            return self.synth_manifest_path().ok_or_else(|| {
                CliError::Config(format!("run {} needs privileged data but there is no synthesize section", row.run_id))
            });
        }
        Ok(self.procgen.manifest_path())
    }

    pub fn privileged_label(&self, row: &RunRow) -> String {
        if let Some(l) = &row.privileged_label {
            return l.clone();
        }
        if !row.method.needs_privileged() {
            return "none".into();
        }
        self.synthesize.as_ref().map(|s| s.source.as_str().to_string()).unwrap_or_else(|| "unknown".into())
    }
}

/// Sets the field named by `PRIVDISTIL_<SECTION>_<KEY>`. `KEY` may descend
/// into nested objects with `__`; a name equal to a top-level key replaces
/// that key. Values parse as JSON, falling back to a plain string.
pub fn apply_override(root: &mut Value, var: &str, raw: &str) -> CliResult<()> {
    let name = var.strip_prefix(ENV_PREFIX).unwrap_or(var).to_ascii_lowercase();
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let obj = root.as_object_mut().ok_or_else(|| CliError::Config("config must be a JSON object".into()))?;
    if obj.contains_key(&name) {
        obj.insert(name, value);
        return Ok(());
    }
    let mut sections: Vec<String> = obj.keys().filter(|k| name.starts_with(&format!("{k}_"))).cloned().collect();
    sections.sort_by_key(|k| std::cmp::Reverse(k.len()));
    let section = sections.first().ok_or_else(|| CliError::Config(format!("override {var} names no config section")))?;
    let key = &name[section.len() + 1..];
    let mut target = obj.get_mut(section.as_str()).unwrap();
    let parts: Vec<&str> = key.split("__").collect();
    for part in &parts[..parts.len() - 1] {
        let map = target.as_object_mut().ok_or_else(|| CliError::Config(format!("override {var}: {part} is not inside an object")))?;
        target = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let map = target.as_object_mut().ok_or_else(|| CliError::Config(format!("override {var}: target is not an object")))?;
    map.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> Value {
        serde_json::json!({
            "seeds": [0],
            "procgen": {"out_dir": "d", "counts": {"train": 2, "val": 1, "test": 1}},
            "train": {"epochs": 2, "runs": []}
        })
    }

    #[test]
    fn overrides_address_sections_and_nested_keys() {
        let mut v = base();
        apply_override(&mut v, "PRIVDISTIL_TRAIN_EPOCHS", "5").unwrap();
        apply_override(&mut v, "PRIVDISTIL_PROCGEN_COUNTS__TRAIN", "7").unwrap();
        apply_override(&mut v, "PRIVDISTIL_PROCGEN_OUT_DIR", "elsewhere").unwrap();
        apply_override(&mut v, "PRIVDISTIL_SEEDS", "[1, 2]").unwrap();
        assert_eq!(v["train"]["epochs"], 5);
        assert_eq!(v["procgen"]["counts"]["train"], 7);
        assert_eq!(v["procgen"]["out_dir"], "elsewhere");
        assert_eq!(v["seeds"], serde_json::json!([1, 2]));
        assert!(apply_override(&mut v, "PRIVDISTIL_NOPE_X", "1").is_err());
    }
}
