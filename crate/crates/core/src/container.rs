//! Self-describing binary container for parameters and feature tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "MOODRDR\0"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 metadata
//! count      u32
//! count × {
//!     name_len u32, name bytes (UTF-8)
//!     ndim     u32, ndim × u64 extents
//!     values   product(extents) × f64
//! }
//! ```
//!
//! Entries are written in name order, so identical contents give identical
//! bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"MOODRDR\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub metadata: String,
    pub entries: BTreeMap<String, Tensor>,
}

impl Container {
    pub fn new(metadata: impl Into<String>) -> Self {
        Self { metadata: metadata.into(), entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries.get(name).ok_or_else(|| Error::Load(format!("missing entry `{name}`")))
    }

    /// Every parameter of `store`, keyed by parameter name.
    pub fn from_params(metadata: impl Into<String>, store: &ParamStore) -> Self {
        let mut c = Self::new(metadata);
        for p in store.iter() {
            c.insert(p.name.clone(), p.value.clone());
        }
        c
    }

    /// Copies matching entries into `store`; every parameter must be present
    /// with the same shape.
    pub fn load_params(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let t = self.get(&name)?.clone();
            store.set_value(id, t).map_err(|e| Error::Load(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Like [`load_params`](Self::load_params) but restricted to parameters
    /// whose name starts with `prefix`. Returns how many were loaded.
    pub fn load_prefixed(&self, store: &mut ParamStore, prefix: &str) -> Result<usize> {
        let ids: Vec<_> = store.ids().filter(|&id| store.get(id).name.starts_with(prefix)).collect();
        for &id in &ids {
            let name = store.get(id).name.clone();
            let t = self.get(&name)?.clone();
            store.set_value(id, t).map_err(|e| Error::Load(format!("{name}: {e}")))?;
        }
        Ok(ids.len())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_bytes(w, self.metadata.as_bytes())?;
        w.write_all(&u32_len(self.entries.len())?.to_le_bytes())?;
        for (name, t) in &self.entries {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&u32_len(t.shape().len())?.to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let metadata = String::from_utf8(read_bytes(r)?).map_err(|_| Error::Format("metadata not UTF-8".into()))?;
        let count = read_u32(r)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name = String::from_utf8(read_bytes(r)?).map_err(|_| Error::Format("name not UTF-8".into()))?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| Error::Format("truncated shape".into()))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(|_| Error::Format(format!("truncated values for `{name}`")))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
            entries.insert(name, t);
        }
        Ok(Self { metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
        Self::read_from(&mut BufReader::new(f))
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} exceeds u32")))
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(&u32_len(b.len())?.to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated integer".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| Error::Format("truncated string".into()))?;
    Ok(b)
}
