//! Named-tensor checkpoint files.
//!
//! Layout, all little-endian: magic `HCK1`, `u32` record count, then per
//! record `u32` name length, UTF-8 name, `u32` rank, `rank` x `u32` dims and
//! the `f32` payload. Configuration values travel as `meta.*` records.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"HCK1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_store(store: &ParamStore) -> Self {
        Checkpoint {
            records: store.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn records(&self) -> &[(String, Tensor)] {
        &self.records
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.records.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.records.push((name, t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set_meta(&mut self, key: &str, values: &[f32]) {
        let t = Tensor::new([values.len()], values.to_vec()).expect("vector shape matches");
        self.insert(format!("meta.{key}"), t);
    }

    pub fn meta(&self, key: &str) -> Result<&[f32]> {
        let name = format!("meta.{key}");
        self.get(&name).map(|t| t.data()).ok_or_else(|| Error::Checkpoint {
            name,
            detail: "missing".into(),
        })
    }

    pub fn meta_usize(&self, key: &str) -> Result<Vec<usize>> {
        Ok(self.meta(key)?.iter().map(|&v| v as usize).collect())
    }

    pub fn meta_scalar(&self, key: &str) -> Result<f32> {
        let v = self.meta(key)?;
        match v {
            [x] => Ok(*x),
            _ => Err(Error::Checkpoint {
                name: format!("meta.{key}"),
                detail: format!("expected one value, found {}", v.len()),
            }),
        }
    }

    /// Overwrites every parameter of `store` from the same-named record.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for p in store.iter_mut() {
            let t = self.get(&p.name).ok_or_else(|| Error::Checkpoint {
                name: p.name.clone(),
                detail: "missing from checkpoint".into(),
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::Checkpoint {
                    name: p.name.clone(),
                    detail: format!("checkpoint shape {:?}, model expects {:?}", t.shape(), p.value.shape()),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!("bad magic {magic:?}, expected \"HCK1\""),
            });
        }
        let count = r.u32("record count")?;
        let mut records = Vec::new();
        for i in 0..count {
            let at = r.pos;
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format {
                    offset: at as u64 + 4,
                    detail: format!("record {i} name is not UTF-8"),
                })?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("dimension")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| Error::Format {
                offset: r.pos as u64,
                detail: format!("record `{name}` dimensions overflow"),
            })?;
            let payload = r.take(numel.saturating_mul(4), "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            records.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                detail: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Checkpoint { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("{what} expected {n} bytes, found {left}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
