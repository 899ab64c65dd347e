use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use privdistil::datamodel::{
    gen_procedural_dataset, load_manifest, oracle_mask, rasterize, save_manifest, DatasetManifest, Sample, Split,
};
use privdistil::evalkit::{
    embed_samples, guided_gradcam, kmeans_eval, linear_probe, nucleus_focus_score, ood_eval, read_results_csv,
    report_markdown, write_results_csv, EncoderWithHead, ResultRow,
};
use privdistil::image::ImageTensor;
use privdistil::sslcore::MethodKind;
use privdistil::train::{
    load_checkpoint, load_primary_encoder, save_checkpoint, train_ssl_samples, train_supervised_samples, TrainConfig,
};
use privdistil::translate::{
    synthesize_pairs_with, train_paired_translator, train_unpaired_translator, NoiseSpec, PairSource, TranslatorMode,
    TranslatorParams,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ExperimentConfig, RunRow, SourceKind};
use crate::error::{CliError, CliResult};
use crate::registry::{config_hash, RegistryEntry, RunRegistry};

/// Options shared by every verb.
#[derive(Debug, Clone, Default)]
pub struct Invocation {
    pub run_id: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub strict_deterministic: bool,
}

const CHECKPOINT_FILE: &str = "checkpoint.pdck";
const LOG_FILE: &str = "train_log.json";
const RUN_CONFIG_FILE: &str = "run_config.json";
const RESULTS_FILE: &str = "results.csv";

fn load(path: &Path) -> CliResult<DatasetManifest> {
    if !path.is_file() {
        return Err(CliError::Runtime(format!("manifest {} does not exist; run the earlier pipeline step first", path.display())));
    }
    Ok(load_manifest(path)?)
}

pub fn cmd_procgen(cfg: &mut ExperimentConfig, inv: &Invocation) -> CliResult<String> {
    if let Some(out) = &inv.out {
        cfg.procgen.out_dir = out.clone();
    }
    let p = &cfg.procgen;
    let m = gen_procedural_dataset(&p.generator, p.counts, &p.out_dir)?;
    let mut per_class = vec![0usize; m.class_count()];
    for r in &m.records {
        per_class[r.label] += 1;
    }
    let classes: Vec<String> = m.class_names.iter().zip(&per_class).map(|(n, c)| format!("{n}={c}")).collect();
    Ok(format!(
        "wrote {} records to {} (train {}, val {}, test {}; {})",
        m.records.len(),
        p.manifest_path().display(),
        p.counts.train,
        p.counts.val,
        p.counts.test,
        classes.join(", ")
    ))
}

#[derive(Serialize)]
struct Provenance<'a> {
    source: &'a str,
    mode: &'a str,
    translator_checkpoint: Option<&'a Path>,
    translator_holdout_mae: Option<f64>,
    imported_dir: Option<&'a Path>,
    noise_sigma: f64,
    noise_seed: u64,
    input_manifest: &'a Path,
}

pub fn cmd_synth(cfg: &ExperimentConfig, inv: &Invocation) -> CliResult<String> {
    if inv.out.is_some() {
        return Err(CliError::Config("--out is not used by synth; set synthesize.output_manifest".into()));
    }
    let s = cfg.synthesize.as_ref().ok_or_else(|| CliError::Config("config has no synthesize section".into()))?;
    let input = cfg.procgen.manifest_path();
    let manifest = load(&input)?;
    let mut holdout = None;
    let source = match s.source {
        SourceKind::Oracle => PairSource::Oracle,
        SourceKind::Translator => {
            let path = s.translator_checkpoint.as_ref().expect("validated");
            let t = TranslatorParams::from_checkpoint(&load_checkpoint(path)?)?;
            holdout = t.history.holdout_mae;
            PairSource::Translator(Box::new(t))
        }
        SourceKind::Imported => PairSource::Imported(s.imported_dir.clone().expect("validated")),
    };
    let noise = (s.noise_sigma > 0.0).then_some(NoiseSpec { sigma: s.noise_sigma, seed: s.noise_seed });
    let mut out = synthesize_pairs_with(&manifest, &source, s.mode, noise)?;
    let out_path = cfg.synth_manifest_path().expect("synthesize section present");
    let out_dir = out_path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if fs::canonicalize(out_dir).ok() != fs::canonicalize(&manifest.root).ok() {
        return Err(CliError::Config(format!(
            "synthesize.output_manifest must sit in the dataset directory {}",
            manifest.root.display()
        )));
    }
    out.root = manifest.root.clone();
    save_manifest(&out, &out_path)?;
    // the shared metadata file now describes the paired manifest; keep the
    // primary manifest loadable
    let prov = Provenance {
        source: s.source.as_str(),
        mode: s.mode.as_str(),
        translator_checkpoint: s.translator_checkpoint.as_deref(),
        translator_holdout_mae: holdout,
        imported_dir: s.imported_dir.as_deref(),
        noise_sigma: s.noise_sigma,
        noise_seed: s.noise_seed,
        input_manifest: &input,
    };
    let prov_path = out_path.with_extension("provenance.json");
    fs::write(&prov_path, serde_json::to_vec_pretty(&prov)?)?;
    Ok(format!("wrote {} privileged images ({}, {}) and {}", out.records.len(), s.source.as_str(), s.mode.as_str(), out_path.display()))
}

pub fn cmd_train_translator(cfg: &ExperimentConfig, inv: &Invocation) -> CliResult<String> {
    let t = cfg.translator.as_ref().ok_or_else(|| CliError::Config("config has no translator section".into()))?;
    let mut tc = t.config.clone();
    if let Some(seed) = inv.seed {
        tc.seed = seed;
    }
    let ck_path = match &inv.out {
        Some(dir) => dir.join(t.checkpoint.file_name().unwrap_or("translator.pdck".as_ref())),
        None => t.checkpoint.clone(),
    };
    let manifest = load(&cfg.procgen.manifest_path())?;
    let mut records: Vec<_> = manifest.records_in(Split::Train).collect();
    if let Some(n) = t.max_images {
        records.truncate(n);
    }
    let mut primaries = Vec::with_capacity(records.len());
    let mut masks = Vec::with_capacity(records.len());
    for r in records {
        let img = ImageTensor::load_png(&manifest.resolve(&r.primary_path))?;
        masks.push(oracle_mask(&img, &manifest.load_truth(&r.id)?, t.mask_mode)?);
        primaries.push(img);
    }
    let params = match t.mode {
        TranslatorMode::Paired => {
            let pairs: Vec<_> = primaries.iter().zip(&masks).collect();
            train_paired_translator(&pairs, &tc)?
        }
        TranslatorMode::Unpaired => {
            // domain B comes from the other half of the images, shuffled, so
            // no pairing survives
            let half = primaries.len() / 2;
            let a: Vec<&ImageTensor> = primaries[..half].iter().collect();
            let mut b: Vec<&ImageTensor> = masks[half..].iter().collect();
            b.shuffle(&mut ChaCha8Rng::seed_from_u64(tc.seed));
            train_unpaired_translator(&a, &b, &tc)?
        }
    };
    if let Some(dir) = ck_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&params.to_checkpoint()?, &ck_path)?;
    let last = params.history.steps.last().copied().unwrap_or_default();
    Ok(match params.history.holdout_mae {
        Some(mae) => format!("saved {} translator to {} (held-out MAE {mae:.4})", t.mode.as_str(), ck_path.display()),
        None => format!("saved {} translator to {} (final cycle loss {:.4})", t.mode.as_str(), ck_path.display(), last.cycle),
    })
}

fn registry(cfg: &ExperimentConfig, inv: &Invocation) -> CliResult<RunRegistry> {
    RunRegistry::open(inv.out.as_deref().unwrap_or(&cfg.train.registry))
}

fn selected<'a>(cfg: &'a ExperimentConfig, inv: &Invocation) -> CliResult<Vec<(&'a RunRow, u64)>> {
    let rows: Vec<&RunRow> = match &inv.run_id {
        Some(id) => vec![cfg.row(id)?],
        None => cfg.train.runs.iter().collect(),
    };
    if rows.is_empty() {
        return Err(CliError::Config("train.runs is empty".into()));
    }
    let seeds: Vec<u64> = match inv.seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    Ok(rows.into_iter().flat_map(|r| seeds.iter().map(move |&s| (r, s))).collect())
}

/// Everything that determines a trained model.
#[derive(Serialize)]
struct RunIdentity<'a> {
    train: &'a TrainConfig,
    manifest: &'a Path,
    train_limit: Option<usize>,
}

fn run_hash(cfg: &ExperimentConfig, row: &RunRow, seed: u64) -> CliResult<(TrainConfig, PathBuf, String)> {
    let tc = cfg.train_config(row, seed)?;
    let manifest = cfg.manifest_for(row)?;
    let hash = config_hash(&RunIdentity { train: &tc, manifest: &manifest, train_limit: row.train_limit })?;
    Ok((tc, manifest, hash))
}

pub fn cmd_train(cfg: &ExperimentConfig, inv: &Invocation) -> CliResult<String> {
    let mut reg = registry(cfg, inv)?;
    let mut lines = Vec::new();
    for (row, seed) in selected(cfg, inv)? {
        let (tc, manifest_path, hash) = run_hash(cfg, row, seed)?;
        reg.check_hash(&row.run_id, seed, &hash)?;
        let dir = reg.run_dir(&row.run_id, seed);
        let ck_path = dir.join(CHECKPOINT_FILE);
        if reg.get(&row.run_id, seed).is_some() && ck_path.is_file() {
            lines.push(format!("{} seed {seed}: up to date", row.run_id));
            continue;
        }
        let manifest = load(&manifest_path)?;
        let mut train = manifest.load_samples(Split::Train)?;
        if let Some(n) = row.train_limit {
            train.truncate(n);
        }
        let outcome = if row.method == MethodKind::Supervised {
            let val = manifest.load_samples(Split::Val)?;
            train_supervised_samples(&train, &val, manifest.class_count(), &tc)?
        } else {
            train_ssl_samples(&train, manifest.class_count(), &tc)?
        };
        fs::create_dir_all(&dir)?;
        save_checkpoint(&outcome.checkpoint, &ck_path)?;
        fs::write(dir.join(LOG_FILE), serde_json::to_vec(&outcome.log)?)?;
        fs::write(dir.join(RUN_CONFIG_FILE), serde_json::to_vec_pretty(&tc)?)?;
        let final_loss = outcome.log.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
        reg.upsert(RegistryEntry {
            run_id: row.run_id.clone(),
            seed,
            method: row.method.as_str().to_string(),
            loss: if row.method == MethodKind::Supervised { "cross_entropy".into() } else { row.loss.name().to_string() },
            privileged: cfg.privileged_label(row),
            config_hash: hash,
            checkpoint: rel(&reg.root, &ck_path),
            results: String::new(),
        })?;
        lines.push(format!("{} seed {seed}: trained {} samples, final epoch loss {final_loss:.4}", row.run_id, train.len()));
    }
    Ok(lines.join("\n"))
}

fn rel(root: &Path, p: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

struct Trained<'a> {
    row: &'a RunRow,
    seed: u64,
    entry: RegistryEntry,
    manifest: DatasetManifest,
}

fn trained<'a>(cfg: &ExperimentConfig, reg: &RunRegistry, row: &'a RunRow, seed: u64) -> CliResult<Trained<'a>> {
    let (_, manifest_path, hash) = run_hash(cfg, row, seed)?;
    reg.check_hash(&row.run_id, seed, &hash)?;
    let entry = reg
        .get(&row.run_id, seed)
        .filter(|e| reg.resolve(&e.checkpoint).is_file())
        .cloned()
        .ok_or_else(|| CliError::Runtime(format!("missing checkpoint for run {} seed {seed}; run `train` first", row.run_id)))?;
    Ok(Trained { row, seed, entry, manifest: load(&manifest_path)? })
}

fn cluster_subset(cfg: &ExperimentConfig, samples: &[Sample]) -> (Vec<Sample>, usize) {
    match &cfg.evaluate.cluster_classes {
        Some(keep) => (
            samples
                .iter()
                .filter_map(|s| keep.iter().position(|&k| k == s.label).map(|i| Sample { label: i, ..s.clone() }))
                .collect(),
            keep.len(),
        ),
        None => (samples.to_vec(), cfg.procgen.generator.class_count),
    }
}

pub fn cmd_eval(cfg: &ExperimentConfig, inv: &Invocation) -> CliResult<String> {
    let mut reg = registry(cfg, inv)?;
    let mut lines = Vec::new();
    for (row, seed) in selected(cfg, inv)? {
        let t = trained(cfg, &reg, row, seed)?;
        let ck = load_checkpoint(&reg.resolve(&t.entry.checkpoint))?;
        let (encoder, params) = load_primary_encoder(&ck)?;
        let train = t.manifest.load_samples(Split::Train)?;
        let test = t.manifest.load_samples(Split::Test)?;
        let classes = t.manifest.class_count();
        let probe_cfg = privdistil::evalkit::ProbeConfig { seed, ..cfg.evaluate.probe };
        let (head, probe) = linear_probe(&encoder, &params, &train, &test, classes, &probe_cfg)?;
        let ood = ood_eval(&encoder, &params, &head, &test, &cfg.evaluate.shift)?;
        let (subset, k) = cluster_subset(cfg, &test);
        let clusters = kmeans_eval(&embed_samples(&encoder, &params, &subset)?, k, seed)?;
        let mut metrics: BTreeMap<String, f64> = BTreeMap::new();
        metrics.insert("accuracy".into(), probe.accuracy);
        metrics.insert("ood_accuracy".into(), ood.shifted.accuracy);
        metrics.insert("ood_drop".into(), ood.drop);
        metrics.insert("cluster_accuracy".into(), clusters.accuracy);
        for (name, acc) in t.manifest.class_names.iter().zip(&probe.per_class_accuracy) {
            metrics.insert(format!("class:{name}"), *acc);
        }
        let mut rows = result_rows(&t, &metrics);
        let dir = reg.run_dir(&row.run_id, seed);
        let path = dir.join(RESULTS_FILE);
        // keep metrics written by other verbs (saliency)
        if path.is_file() {
            let keep: Vec<ResultRow> = read_results_csv(&path)?.into_iter().filter(|r| !metrics.contains_key(&r.metric)).collect();
            rows.extend(keep);
        }
        write_results_csv(&rows, &path)?;
        let mut entry = t.entry.clone();
        entry.results = rel(&reg.root, &path);
        reg.upsert(entry)?;
        lines.push(format!(
            "{} seed {seed}: accuracy {:.4}, ood drop {:.4}, cluster accuracy {:.4}",
            row.run_id, probe.accuracy, ood.drop, clusters.accuracy
        ));
    }
    Ok(lines.join("\n"))
}

fn result_rows(t: &Trained, metrics: &BTreeMap<String, f64>) -> Vec<ResultRow> {
    metrics
        .iter()
        .map(|(m, &v)| ResultRow {
            run_id: t.row.run_id.clone(),
            method: t.entry.method.clone(),
            loss: t.entry.loss.clone(),
            privileged: t.entry.privileged.clone(),
            seed: t.seed,
            metric: m.clone(),
            value: v,
        })
        .collect()
}

pub fn cmd_saliency(cfg: &ExperimentConfig, inv: &Invocation) -> CliResult<String> {
    let mut reg = registry(cfg, inv)?;
    let mut lines = Vec::new();
    for (row, seed) in selected(cfg, inv)? {
        let t = trained(cfg, &reg, row, seed)?;
        let ck = load_checkpoint(&reg.resolve(&t.entry.checkpoint))?;
        let (encoder, params) = load_primary_encoder(&ck)?;
        let train = t.manifest.load_samples(Split::Train)?;
        let test = t.manifest.load_samples(Split::Test)?;
        let probe_cfg = privdistil::evalkit::ProbeConfig { seed, ..cfg.evaluate.probe };
        let (head, _) = linear_probe(&encoder, &params, &train, &test, t.manifest.class_count(), &probe_cfg)?;
        let model = EncoderWithHead::from_probe(&encoder, &params, &head)?;
        let dir = reg.run_dir(&row.run_id, seed);
        let out_dir = dir.join("saliency");
        fs::create_dir_all(&out_dir)?;
        let n = cfg.evaluate.saliency_samples.min(test.len());
        let mut scores = Vec::new();
        for s in &test[..n] {
            let map = guided_gradcam(&model, &s.primary, s.label)?;
            let mask: Vec<bool> = rasterize(&t.manifest.load_truth(&s.id)?).foreground().collect();
            match nucleus_focus_score(&map, &mask) {
                Ok(v) => scores.push(v),
                Err(privdistil::Error::Degenerate(_)) => {}
                Err(e) => return Err(e.into()),
            }
            map.save_png(&out_dir.join(format!("{}.png", s.id)))?;
        }
        let focus = if scores.is_empty() { 0.0 } else { scores.iter().sum::<f64>() / scores.len() as f64 };
        let metrics = BTreeMap::from([("nucleus_focus".to_string(), focus)]);
        let mut rows = result_rows(&t, &metrics);
        let path = dir.join(RESULTS_FILE);
        if path.is_file() {
            rows.extend(read_results_csv(&path)?.into_iter().filter(|r| r.metric != "nucleus_focus"));
        }
        write_results_csv(&rows, &path)?;
        let mut entry = t.entry.clone();
        entry.results = rel(&reg.root, &path);
        reg.upsert(entry)?;
        lines.push(format!(
            "{} seed {seed}: {n} saliency maps, mean nucleus focus {focus:.4} over {} non-zero maps",
            row.run_id,
            scores.len()
        ));
    }
    Ok(lines.join("\n"))
}

pub fn cmd_report(cfg: &ExperimentConfig, inv: &Invocation) -> CliResult<String> {
    let reg = RunRegistry::open(&cfg.train.registry)?;
    let mut rows = Vec::new();
    for e in reg.entries.iter().filter(|e| !e.results.is_empty()) {
        rows.extend(read_results_csv(&reg.resolve(&e.results))?);
    }
    if rows.is_empty() {
        return Err(CliError::Runtime(format!("registry {} has no evaluated runs", reg.root.display())));
    }
    let place = |p: &Path| match &inv.out {
        Some(dir) => dir.join(p.file_name().unwrap_or(p.as_os_str())),
        None => p.to_path_buf(),
    };
    let (csv_path, md_path) = (place(&cfg.report.csv), place(&cfg.report.markdown));
    write_results_csv(&rows, &csv_path)?;
    if let Some(dir) = md_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&md_path, report_markdown(&rows)?)?;
    Ok(format!("{} result rows -> {} and {}", rows.len(), csv_path.display(), md_path.display()))
}
