//! Self-describing tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"FMKC"
//! version    u32
//! meta_len   u32, meta: UTF-8 JSON
//! step       u64
//! n_sections u32
//!   name_len u32, name, n_tensors u32
//!     name_len u32, name, ndim u32, dims: u64 * ndim, values: f32 * prod(dims)
//! checksum   u64  FNV-1a of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FMKC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Section {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            tensors: Vec::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub meta: String,
    pub step: u64,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.meta);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            put_str(&mut out, &s.name);
            out.extend_from_slice(&(s.tensors.len() as u32).to_le_bytes());
            for (name, t) in &s.tensors {
                put_str(&mut out, name);
                out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        let sum = fnv1a64(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("missing magic header".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(Error::Corrupt("truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(Error::Corrupt("checksum mismatch (truncated or modified)".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let meta = r.string()?;
        let step = r.u64()?;
        let n_sections = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n_sections.min(64));
        for _ in 0..n_sections {
            let name = r.string()?;
            let n = r.u32()? as usize;
            let mut tensors = Vec::with_capacity(n.min(4096));
            for _ in 0..n {
                let tname = r.string()?;
                let ndim = r.u32()? as usize;
                if ndim > 8 {
                    return Err(Error::Corrupt(format!("tensor {tname}: {ndim} dims")));
                }
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u64()? as usize);
                }
                let count = shape
                    .iter()
                    .try_fold(1usize, |a, &d| a.checked_mul(d))
                    .ok_or_else(|| Error::Corrupt(format!("tensor {tname}: shape overflow")))?;
                let raw = r.take(count.checked_mul(4).ok_or_else(|| {
                    Error::Corrupt(format!("tensor {tname}: shape overflow"))
                })?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                tensors.push((tname, Tensor::new(shape, data)?));
            }
            sections.push(Section { name, tensors });
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Self {
            meta,
            step,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Corrupt(format!(
                "need {n} bytes at offset {}, file ends at {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt("invalid UTF-8 in name".into()))
    }
}
