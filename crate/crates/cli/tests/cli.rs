use std::path::Path;
use std::process::{Command, Output};

use privdistil::datamodel::{ProcGenConfig, SplitCounts};
use privdistil::sslcore::EncoderConfig;
use serde_json::{json, Value};

fn small_config(dir: &Path) -> Value {
    let generator = ProcGenConfig { image_size: 32, ..ProcGenConfig::default() };
    let encoder = EncoderConfig { stage_widths: vec![8, 16], blocks_per_stage: vec![1, 1], embed_dim: 16, ..EncoderConfig::small_cnn(3, 32) };
    json!({
        "seeds": [0],
        "procgen": {
            "out_dir": dir.join("data"),
            "counts": SplitCounts { train: 16, val: 4, test: 8 },
            "generator": generator,
        },
        "synthesize": { "source": "oracle", "mode": "binary" },
        "train": {
            "registry": dir.join("runs"),
            "epochs": 1,
            "peak_lr": 1e-3,
            "warmup_epochs": 0,
            "batch_size": 8,
            "encoder": encoder,
            "projector": { "layers": 2, "width": 16, "batch_norm": true },
            "runs": [
                { "run_id": "sia", "method": "siamese_unprivileged", "loss": { "kind": "infonce", "temperature": 0.1 } },
                { "run_id": "tri", "method": "trident", "loss": { "kind": "infonce", "temperature": 0.1 } }
            ]
        },
        "evaluate": { "cluster_classes": [0, 1], "saliency_samples": 2 },
        "report": { "csv": dir.join("report/results.csv"), "markdown": dir.join("report/summary.md") }
    })
}

fn write_config(dir: &Path, cfg: &Value) -> std::path::PathBuf {
    let p = dir.join("exp.json");
    std::fs::write(&p, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    p
}

fn run(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privdistil"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("PRIVDISTIL_SEEDS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_field_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg["procgen"]["generator"].as_object_mut().unwrap().remove("image_size");
    let o = run(&write_config(dir.path(), &cfg), &["procgen"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("image_size"), "{}", stderr(&o));
}

#[test]
fn procgen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(dir.path()));
    let manifest = dir.path().join("data/manifest.csv");
    assert!(run(&cfg, &["procgen"]).status.success());
    let first = std::fs::read(&manifest).unwrap();
    let img = std::fs::read_dir(dir.path().join("data")).unwrap().count();
    assert!(run(&cfg, &["procgen"]).status.success());
    assert_eq!(first, std::fs::read(&manifest).unwrap());
    assert_eq!(img, std::fs::read_dir(dir.path().join("data")).unwrap().count());
}

#[test]
fn translator_source_without_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg["synthesize"]["source"] = json!("translator");
    let o = run(&write_config(dir.path(), &cfg), &["synth"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("translator_checkpoint"));
}

#[test]
fn env_override_reaches_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(dir.path()));
    let o = Command::new(env!("CARGO_BIN_EXE_privdistil"))
        .arg("--config")
        .arg(&cfg)
        .arg("procgen")
        .env("PRIVDISTIL_PROCGEN_GENERATOR__IMAGE_SIZE", "\"big\"")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("image_size"), "{}", stderr(&o));
}

#[test]
fn eval_before_train_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(dir.path()));
    assert!(run(&cfg, &["procgen"]).status.success());
    let o = run(&cfg, &["eval", "--run-id", "sia"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("checkpoint"));
    let o = run(&cfg, &["report"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &small_config(dir.path()));
    for verb in ["procgen", "synth", "train", "eval", "saliency", "report"] {
        let o = run(&cfg_path, &[verb]);
        assert!(o.status.success(), "{verb}: {}", stderr(&o));
    }
    let reg = dir.path().join("runs");
    for run_id in ["sia", "tri"] {
        let d = reg.join(run_id).join("seed-0");
        for f in ["checkpoint.pdck", "train_log.json", "run_config.json", "results.csv"] {
            assert!(d.join(f).is_file(), "{run_id}/{f}");
        }
        assert_eq!(std::fs::read_dir(d.join("saliency")).unwrap().count(), 2);
    }
    let results = std::fs::read_to_string(dir.path().join("report/results.csv")).unwrap();
    for metric in ["accuracy", "ood_drop", "cluster_accuracy", "nucleus_focus", "class:"] {
        assert!(results.contains(metric), "{metric}");
    }
    assert!(dir.path().join("report/summary.md").is_file());

    // a second train is a no-op; a changed config for the same run is refused
    let ck = reg.join("sia/seed-0/checkpoint.pdck");
    let before = std::fs::read(&ck).unwrap();
    let o = run(&cfg_path, &["train", "--run-id", "sia"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("up to date"));
    assert_eq!(before, std::fs::read(&ck).unwrap());
    let mut changed = small_config(dir.path());
    changed["train"]["epochs"] = json!(2);
    let o = run(&write_config(dir.path(), &changed), &["train", "--run-id", "sia"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_run_id_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small_config(dir.path()));
    let o = run(&cfg, &["train", "--run-id", "nope"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
