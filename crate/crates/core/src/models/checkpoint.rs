//! Binary named-tensor checkpoints.
//!
//! Layout (little-endian): magic `MVSL`, format version `u32`, encoder
//! config fingerprint `u64`, tensor count `u32`; then per tensor the name
//! (`u32` byte length + UTF-8), rank `u32`, dims (`u32` each) and the `f32`
//! payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::backend::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVSL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(fingerprint: u64) -> Self {
        Checkpoint {
            fingerprint,
            tensors: Vec::new(),
        }
    }

    /// Every entry of `store`, names prefixed with `prefix`.
    pub fn from_store(fingerprint: u64, store: &ParamStore) -> Self {
        let mut c = Self::new(fingerprint);
        c.extend_from_store("", store);
        c
    }

    pub fn extend_from_store(&mut self, prefix: &str, store: &ParamStore) {
        for e in store.entries() {
            self.push(format!("{prefix}{}", e.name), e.value.clone());
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n.starts_with(prefix))
    }

    /// Store holding the tensors whose names start with `prefix`, with the
    /// prefix stripped.
    pub fn substore(&self, prefix: &str) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in &self.tensors {
            if let Some(rest) = n.strip_prefix(prefix) {
                s.add(rest, t.clone(), crate::backend::ParamKind::Trainable);
            }
        }
        s
    }

    /// Errors unless the fingerprint matches or `allow_mismatch` is set.
    pub fn verify(&self, expected: u64, allow_mismatch: bool) -> Result<()> {
        if self.fingerprint != expected && !allow_mismatch {
            return Err(Error::Checkpoint(format!(
                "encoder fingerprint mismatch: checkpoint {:016x}, expected {expected:016x}",
                self.fingerprint
            )));
        }
        Ok(())
    }

    /// Copies every tensor `<ckpt_prefix><name>` into the entries of `store`
    /// whose names start with `store_prefix`.
    pub fn load_into(&self, store: &mut ParamStore, ckpt_prefix: &str, store_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for e in store.entries_mut().iter_mut().filter(|e| e.name.starts_with(store_prefix)) {
            let name = format!("{ckpt_prefix}{}", e.name);
            let t = self
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != e.value.shape() {
                return Err(Error::shape("checkpoint tensor", e.value.shape(), t.shape()));
            }
            e.value = t.clone();
            copied += 1;
        }
        Ok(copied)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
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
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut fp = [0u8; 8];
        read_exact(&mut r, &mut fp)?;
        let fingerprint = u64::from_le_bytes(fp);
        let count = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            if len > r.len() {
                return Err(Error::Checkpoint("truncated tensor name".into()));
            }
            let mut name = vec![0u8; len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n * 4 > r.len() {
                return Err(Error::Checkpoint(format!("truncated payload for {name}")));
            }
            let data = r[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            r = &r[n * 4..];
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { fingerprint, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of checkpoint".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}
