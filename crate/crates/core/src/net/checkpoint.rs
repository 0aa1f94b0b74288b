//! Binary checkpoint format.
//!
//! Layout, all integers little-endian: magic `RLD2`, `u32` version, `u64`
//! entry count, then per entry `u64` name length, UTF-8 name, `u64` rank,
//! `rank` × `u64` dims, and the values as `f64`.

use std::collections::BTreeMap;
use std::path::Path;

use super::{NumArray, ParamStore};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RLD2";
pub const VERSION: u32 = 1;

/// Named arrays in a single checkpoint file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: BTreeMap<String, NumArray>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: NumArray) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&NumArray> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry '{name}'")))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &NumArray)> {
        self.entries.iter()
    }

    pub fn put_scalar(&mut self, name: impl Into<String>, x: f64) {
        self.insert(name, NumArray::scalar(x));
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let v = self.get(name)?;
        if v.len() != 1 {
            return Err(Error::Checkpoint(format!("entry '{name}' is not a scalar")));
        }
        Ok(v.data()[0])
    }

    /// Stores every parameter of `store` under `{prefix}/{name}`.
    pub fn put_store(&mut self, prefix: &str, store: &ParamStore) {
        for (name, p) in store.iter() {
            self.insert(format!("{prefix}/{name}"), p.value().clone());
        }
    }

    /// Collects all entries under `{prefix}/` into a store.
    pub fn store(&self, prefix: &str) -> ParamStore {
        let lead = format!("{prefix}/");
        let mut out = ParamStore::new();
        for (name, v) in &self.entries {
            if let Some(rest) = name.strip_prefix(&lead) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, v) in &self.entries {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(v.shape().len() as u64).to_le_bytes());
            for &d in v.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in v.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let count = r.u64()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u64()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Checkpoint(format!("entry name is not UTF-8: {e}")))?
                .to_string();
            let rank = r.u64()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| r.take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
                .collect::<Result<Vec<_>>>()?;
            entries.insert(name, NumArray::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
