//! Binary checkpoint: `PDCK`, version, named f32 tensors, then a JSON
//! metadata blob. All integers little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use privdistil_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// What produced the tensors, e.g. `ssl`, `supervised`, `translator`.
    pub kind: String,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: ParamStore<f32>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(tensors: ParamStore<f32>, meta: CheckpointMeta) -> Self {
        Self { version: CHECKPOINT_VERSION, tensors, meta }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in self.tensors.iter() {
            let name_len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank of {name} too large")))?;
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dimension of {name} too large")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let json = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let count = r.u32("tensor count")?;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?, &name)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            if tensors.contains(&name) {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            tensors.insert(name, Tensor::new(shape, data));
        }
        let json_len = r.u32("metadata length")? as usize;
        let meta = serde_json::from_slice(r.take(json_len, "metadata")?)
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { version, tensors, meta })
    }

    /// Errors on any stored tensor not in `expected`, or any expected
    /// tensor that is missing or misshapen.
    pub fn check_names(&self, expected: &ParamStore<f32>) -> Result<()> {
        if let Some(name) = self.tensors.names().find(|n| !expected.contains(n)) {
            return Err(Error::Checkpoint(format!("unknown tensor name {name}")));
        }
        for (name, t) in expected.iter() {
            match self.tensors.get(name) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(s) if s.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {:?}", s.shape(), t.shape())))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ck.to_bytes()?).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Checkpoint::from_bytes(&fs::read(path).map_err(io_err(path))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut t = ParamStore::new();
        t.insert("a.w", Tensor::new([2, 3], vec![1.0, -2.5, 3.25, 0.1, f32::MIN_POSITIVE, 7.0]));
        t.insert("b", Tensor::scalar(0.3));
        let meta = CheckpointMeta {
            kind: "ssl".into(),
            config: serde_json::json!({"lr": 0.1, "x": [1, 2]}),
            epoch: 3,
            metrics: [("loss".to_string(), 0.123456789012345)].into_iter().collect(),
        };
        Checkpoint::new(t, meta)
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"PDCK");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn every_truncation_is_a_checkpoint_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in 0..bytes.len() {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
    }

    #[test]
    fn version_and_name_checks() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("version")));
        let ck = sample();
        let mut expected = ck.tensors.clone();
        assert!(ck.check_names(&expected).is_ok());
        expected.insert("c", Tensor::scalar(0.0));
        assert!(ck.check_names(&expected).is_err());
        let only_a = ck.tensors.subset("a.");
        assert!(matches!(ck.check_names(&only_a), Err(Error::Checkpoint(m)) if m.contains("unknown")));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.pdck");
        let ck = sample();
        save_checkpoint(&ck, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::MissingFile(_))));
    }
}
