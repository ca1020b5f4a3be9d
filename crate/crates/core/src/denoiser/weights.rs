//! `ZTH1` weight container.
//!
//! ```text
//! "ZTH1"  u32 entry count
//! per entry: u16 name length, UTF-8 name, u8 rank, rank × u32 dims, f32 payload
//! ```
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ByteCursor, Tensor};

pub const ZTH_MAGIC: &[u8; 4] = b"ZTH1";

/// Named `f32` arrays in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightContainer {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Format version carried by the magic bytes.
    pub fn version(&self) -> u32 {
        1
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.len() > u16::MAX as usize || tensor.rank() > u8::MAX as usize {
            return Err(Error::Config(format!("entry '{name}' exceeds format limits")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate weight name '{name}'")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Every census entry is present with its exact shape, and nothing else is.
    pub fn check_census(&self, census: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in census {
            let t = self
                .get(name)
                .ok_or_else(|| Error::Census(format!("missing weight '{name}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Census(format!(
                    "weight '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        if self.len() != census.len() {
            let extra: Vec<&str> = self
                .iter()
                .map(|(n, _)| n)
                .filter(|n| !census.iter().any(|(c, _)| c == n))
                .collect();
            return Err(Error::Census(format!("unexpected weights {extra:?}")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ZTH_MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        let magic = cur.take(4)?;
        if magic != ZTH_MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected ZTH1")));
        }
        let count = cur.u32()?;
        let mut out = Self::new();
        for _ in 0..count {
            let at = cur.offset();
            let len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(len)?)
                .map_err(|_| Error::format(at + 2, "entry name is not UTF-8"))?
                .to_owned();
            let rank = cur.u8()? as usize;
            if rank == 0 {
                return Err(Error::format(cur.offset() - 1, format!("entry '{name}' has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(cur.offset(), "entry size overflows"))?;
            let data = cur.f32s(n)?;
            let tensor = Tensor::new(shape, data).map_err(|e| Error::format(at, e.to_string()))?;
            if out.index.contains_key(&name) {
                return Err(Error::format(at, format!("duplicate weight name '{name}'")));
            }
            out.insert(name, tensor)?;
        }
        if !cur.is_at_end() {
            return Err(Error::format(cur.offset(), "trailing bytes after last entry"));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Reads a ZTH1 file.
pub fn load_weights(path: &Path) -> Result<WeightContainer> {
    WeightContainer::load(path)
}

/// Writes a ZTH1 file.
pub fn save_weights(container: &WeightContainer, path: &Path) -> Result<()> {
    container.save(path)
}
