//! Checkpoint container. Layout, little-endian throughout:
//!
//! ```text
//! magic "NTCK" | version u32 | meta_len u64 | meta (JSON bytes)
//! | section_count u64 | sections...
//! section: name_len u64 | name | frozen u8 | rank u64 | dims u64*
//!          | element_count u64 | f64 data
//! ```
//!
//! The metadata bytes are kept verbatim from load to save, so a pure
//! load-then-save round trip is byte-identical even though readers only
//! ever look at the parsed JSON view.

use std::collections::BTreeSet;
use std::path::Path;

use nt_core::Tensor;

use crate::artifacts::atomic_write;
use crate::error::{Result, TrainError};

const MAGIC: [u8; 4] = *b"NTCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: String,
    pub frozen: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    meta_raw: Vec<u8>,
    pub sections: Vec<Section>,
}

fn bad(path: &Path, what: impl std::fmt::Display) -> TrainError {
    TrainError::Incompatible(format!("{}: {what}", path.display()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let chunk = self.bytes.get(self.at..self.at + n)?;
        self.at += n;
        Some(chunk)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn len(&mut self) -> Option<usize> {
        // Length fields bounded by the file size guard against huge
        // allocations from corrupt headers.
        let v = self.u64()?;
        (v as usize <= self.bytes.len()).then_some(v as usize)
    }
}

impl Checkpoint {
    pub fn new(meta: &serde_json::Value) -> Self {
        let mut meta_raw = serde_json::to_vec_pretty(meta).expect("meta serializes");
        meta_raw.push(b'\n');
        Checkpoint { meta_raw, sections: Vec::new() }
    }

    pub fn meta(&self) -> Result<serde_json::Value> {
        Ok(serde_json::from_slice(&self.meta_raw)?)
    }

    pub fn meta_str(&self, key: &str) -> Option<String> {
        let meta = self.meta().ok()?;
        meta.get(key).and_then(|v| v.as_str()).map(|s| s.to_string())
    }

    pub fn push_tensor(&mut self, name: &str, tensor: &Tensor<f64>, frozen: bool) {
        self.sections.push(Section {
            name: name.to_string(),
            frozen,
            shape: tensor.shape().to_vec(),
            data: tensor.data().to_vec(),
        });
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f64>> {
        let s = self
            .sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| TrainError::Incompatible(format!("checkpoint lacks section {name}")))?;
        Ok(Tensor::new(&s.shape, s.data.clone())
            .map_err(|e| TrainError::Incompatible(format!("section {name}: {e}")))?)
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta_raw.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.meta_raw);
        out.extend_from_slice(&(self.sections.len() as u64).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u64).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.push(s.frozen as u8);
            out.extend_from_slice(&(s.shape.len() as u64).to_le_bytes());
            for &d in &s.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(s.data.len() as u64).to_le_bytes());
            for &v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names: BTreeSet<&str> = self.sections.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names.len(), self.sections.len(), "duplicate checkpoint section");
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                TrainError::MissingInput(format!("checkpoint {}", path.display()))
            } else {
                TrainError::Io(e)
            }
        })?;
        let mut r = Reader { bytes: &bytes, at: 0 };
        let truncated = || bad(path, "truncated");
        if r.take(4).ok_or_else(truncated)? != MAGIC {
            return Err(bad(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32().ok_or_else(truncated)?;
        if version != VERSION {
            return Err(bad(path, format!("unsupported version {version}")));
        }
        let meta_len = r.len().ok_or_else(truncated)?;
        let meta_raw = r.take(meta_len).ok_or_else(truncated)?.to_vec();
        serde_json::from_slice::<serde_json::Value>(&meta_raw)
            .map_err(|e| bad(path, format!("metadata is not JSON: {e}")))?;
        let count = r.len().ok_or_else(truncated)?;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.len().ok_or_else(truncated)?;
            let name = std::str::from_utf8(r.take(name_len).ok_or_else(truncated)?)
                .map_err(|_| bad(path, "section name is not utf-8"))?
                .to_string();
            let frozen = match r.take(1).ok_or_else(truncated)?[0] {
                0 => false,
                1 => true,
                other => return Err(bad(path, format!("bad frozen flag {other}"))),
            };
            let rank = r.len().ok_or_else(truncated)?;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(truncated)? as usize);
            }
            let numel = r.u64().ok_or_else(truncated)? as usize;
            if shape.iter().product::<usize>() != numel {
                return Err(bad(path, format!("section {name}: shape does not match length")));
            }
            let raw = r.take(numel.checked_mul(8).ok_or_else(truncated)?).ok_or_else(truncated)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            sections.push(Section { name, frozen, shape, data });
        }
        if r.at != bytes.len() {
            return Err(bad(path, "trailing bytes after the last section"));
        }
        Ok(Checkpoint { meta_raw, sections })
    }
}
