//! Completed runs on disk: `<root>/<run_id>/seed-<n>/` per run plus an
//! `index.csv` rewritten atomically on every update.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub run_id: String,
    pub seed: u64,
    pub method: String,
    pub loss: String,
    pub privileged: String,
    pub config_hash: String,
    /// Relative to the registry root.
    pub checkpoint: String,
    /// Relative to the registry root; empty until evaluated.
    pub results: String,
}

#[derive(Debug, Clone)]
pub struct RunRegistry {
    pub root: PathBuf,
    pub entries: Vec<RegistryEntry>,
}

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<T: Serialize>(value: &T) -> CliResult<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

impl RunRegistry {
    /// Opens `root`, starting empty when there is no index yet.
    pub fn open(root: &Path) -> CliResult<Self> {
        let index = root.join(INDEX_FILE);
        let entries = if index.is_file() {
            let mut r = csv::Reader::from_path(&index)?;
            r.deserialize().collect::<Result<Vec<RegistryEntry>, _>>()?
        } else {
            Vec::new()
        };
        Ok(Self { root: root.to_path_buf(), entries })
    }

    pub fn run_dir(&self, run_id: &str, seed: u64) -> PathBuf {
        self.root.join(run_id).join(format!("seed-{seed}"))
    }

    pub fn get(&self, run_id: &str, seed: u64) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.run_id == run_id && e.seed == seed)
    }

    /// Errors if a stored entry for the same run and seed was made under a
    /// different configuration.
    pub fn check_hash(&self, run_id: &str, seed: u64, hash: &str) -> CliResult<()> {
        match self.get(run_id, seed) {
            Some(e) if e.config_hash != hash => Err(CliError::Config(format!(
                "run {run_id} seed {seed} was recorded with config hash {} but the current config hashes to {hash}",
                e.config_hash
            ))),
            _ => Ok(()),
        }
    }

    /// Inserts or replaces the entry for its run and seed, then rewrites the
    /// index.
    pub fn upsert(&mut self, entry: RegistryEntry) -> CliResult<()> {
        match self.entries.iter_mut().find(|e| e.run_id == entry.run_id && e.seed == entry.seed) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
        self.entries.sort_by(|a, b| (&a.run_id, a.seed).cmp(&(&b.run_id, b.seed)));
        self.save()
    }

    fn save(&self) -> CliResult<()> {
        fs::create_dir_all(&self.root)?;
        let index = self.root.join(INDEX_FILE);
        let tmp = self.root.join(format!("{INDEX_FILE}.tmp.{}", std::process::id()));
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            for e in &self.entries {
                w.serialize(e)?;
            }
            if self.entries.is_empty() {
                w.write_record(["run_id", "seed", "method", "loss", "privileged", "config_hash", "checkpoint", "results"])?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, &index)?;
        Ok(())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(run: &str, seed: u64, hash: &str) -> RegistryEntry {
        RegistryEntry {
            run_id: run.into(),
            seed,
            method: "trident".into(),
            loss: "vicreg".into(),
            privileged: "oracle".into(),
            config_hash: hash.into(),
            checkpoint: format!("{run}/seed-{seed}/checkpoint.pdck"),
            results: String::new(),
        }
    }

    #[test]
    fn index_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let mut reg = RunRegistry::open(dir.path()).unwrap();
        assert!(reg.entries.is_empty());
        reg.upsert(entry("b", 1, "h1")).unwrap();
        reg.upsert(entry("a", 0, "h0")).unwrap();
        reg.upsert(entry("b", 1, "h2")).unwrap();
        let back = RunRegistry::open(dir.path()).unwrap();
        assert_eq!(back.entries, vec![entry("a", 0, "h0"), entry("b", 1, "h2")]);
        assert!(back.check_hash("b", 1, "h2").is_ok());
        assert!(matches!(back.check_hash("b", 1, "h1"), Err(CliError::Config(_))));
        assert!(back.check_hash("c", 0, "anything").is_ok());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = config_hash(&serde_json::json!({"x": 1})).unwrap();
        assert_eq!(a, config_hash(&serde_json::json!({"x": 1})).unwrap());
        assert_ne!(a, config_hash(&serde_json::json!({"x": 2})).unwrap());
        assert_eq!(a.len(), 64);
    }
}
