//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"METR"  u32 version  u32 count
//! count x { u32 name_len, name (UTF-8), u32 rank, rank x u64 dim, f64 payload }
//! [u8; 32] SHA-256 of the model's canonical config text
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"METR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub config_digest: [u8; 32],
}

pub fn config_digest(canonical: &str) -> [u8; 32] {
    Sha256::digest(canonical.as_bytes()).into()
}

impl Checkpoint {
    /// Snapshot of every parameter value in store order.
    pub fn from_store(store: &ParamStore, canonical_config: &str) -> Self {
        Self {
            tensors: store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect(),
            config_digest: config_digest(canonical_config),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|(n, t)| 12 + n.len() + 8 * (t.rank() + t.len())).sum();
        let mut out = Vec::with_capacity(12 + payload + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.config_digest);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error(0, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error(4, &format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u32()? as usize;
            let name = core::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error(at, "tensor name is not UTF-8"))?
                .into();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| r.error(at, "dimension overflows usize"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.error(at, "element count overflows"))?;
            if n.checked_mul(8).is_none_or(|b| b > r.remaining()) {
                return Err(r.error(r.pos, "truncated tensor payload"));
            }
            let data = r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|_| r.error(at, "invalid tensor shape"))?;
            tensors.push((name, t));
        }
        let config_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        if r.remaining() != 0 {
            return Err(r.error(r.pos, "trailing bytes after digest"));
        }
        Ok(Self { tensors, config_digest })
    }

    /// Copies every tensor into `store`, which must hold exactly the same
    /// names and shapes.
    ///
    /// A tensor whose shape disagrees with the model is reported first, in
    /// file order, before any missing or unexpected names.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in &self.tensors {
            if let Ok(id) = store.id(name) {
                let expected = store.value(id).shape();
                if expected != t.shape() {
                    return Err(Error::CheckpointShape {
                        name: name.clone(),
                        expected: expected.to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
            }
        }
        if let Some((name, _)) = self.tensors.iter().find(|(n, _)| store.id(n).is_err()) {
            return Err(Error::UnknownParameter(name.clone()));
        }
        if let Some(missing) = store.iter().find(|(_, p)| !self.tensors.iter().any(|(n, _)| *n == p.name)) {
            return Err(Error::UnknownParameter(format!("{} (absent from checkpoint)", missing.1.name)));
        }
        if self.tensors.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint repeats names: {} tensors for {} parameters",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = store.id(name)?;
            store.replace_value(id, t.clone());
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, reason: &str) -> Error {
        Error::CheckpointParse {
            offset,
            reason: reason.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error(self.pos, &format!("truncated: need {n} bytes, {} left", self.remaining())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
