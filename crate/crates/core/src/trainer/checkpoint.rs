//! Binary container for checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "KCVAECKP" | version u32 | meta_len u64 | meta (UTF-8 `key=value` lines)
//! tensor_count u32 | per tensor: name_len u32, name, ndim u32, dims u64 x ndim, data f64 x n
//! sha256 of everything above (32 bytes)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::diff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"KCVAECKP";
pub const FORMAT_VERSION: u32 = 1;

/// Ordered metadata pairs plus named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let mut meta = String::new();
        for (k, v) in &self.meta {
            meta.push_str(k);
            meta.push('=');
            meta.push_str(v);
            meta.push('\n');
        }
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err("file too short".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if &body[..8] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version}, expected {FORMAT_VERSION}"));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err("checksum mismatch".into());
        }
        let meta_len = r.u64()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|e| format!("metadata is not UTF-8: {e}"))?;
        let mut pairs = Vec::new();
        for line in meta.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("bad metadata line {line:?}"))?;
            pairs.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| format!("tensor name: {e}"))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or("tensor too large")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| format!("tensor {name}: {e}"))?;
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(format!("{} trailing bytes", body.len() - r.pos));
        }
        Ok(Container { meta: pairs, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        Container::from_bytes(&bytes).map_err(|msg| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or("truncated file")?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
