//! Binary checkpoint format.
//!
//! ```text
//! magic     8 bytes   "SPTCKPT\0"
//! version   u32
//! seed      u64
//! config    u64 length + UTF-8 JSON
//! count     u64
//! tensors   count × { u32 name length, name, u32 ndim, ndim × u64 dims, numel × f64 }
//! crc32     u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SPTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    /// JSON snapshot of whatever configuration produced the tensors.
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(seed: u64, config: String) -> Self {
        Self {
            seed,
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor named {name:?}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let seed = r.u64("seed")?;
        let config_len = r.len("config length")?;
        let config = String::from_utf8(r.take(config_len, "config")?.to_vec())
            .map_err(|_| Error::Format("config is not UTF-8".into()))?;
        let count = r.len("tensor count")?;
        let mut tensors = Vec::new();
        for i in 0..count {
            let name_len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Format(format!("tensor {i} name is not UTF-8")))?;
            let ndim = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            let mut numel = 1usize;
            for _ in 0..ndim {
                let d = r.len("tensor dim")?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
                shape.push(d);
            }
            let bytes_needed = numel
                .checked_mul(8)
                .ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
            let raw = r.take(bytes_needed, "tensor data")?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
            tensors.push((name, t));
        }
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checksum",
                bytes.len() - r.pos
            )));
        }
        let actual = crc32fast::hash(&bytes[..body_end]);
        if stored != actual {
            return Err(Error::Format(format!(
                "checksum mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        Ok(Self { seed, config, tensors })
    }

    /// Writes through a temporary file and renames, so readers never see a
    /// half-written checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(Error::Truncated {
                offset: self.bytes.len(),
                what: format!("{what} needs {n} bytes at offset {}, {remaining} available", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in memory")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(42, r#"{"a":1}"#.into());
        c.push("w", Tensor::from_rows(&[vec![1.5, -0.0], vec![f64::MIN_POSITIVE, 1e300]]));
        c.push("s", Tensor::scalar(-3.25));
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.config, c.config);
        for ((n1, t1), (n2, t2)) in c.tensors.iter().zip(&back.tensors) {
            assert_eq!(n1, n2);
            assert!(t1.bit_eq(t2));
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = sample().to_bytes();
        let err = Checkpoint::from_bytes(&bytes[..30]).unwrap_err();
        assert!(matches!(err, Error::Truncated { offset: 30, .. }), "{err}");
    }

    #[test]
    fn wrong_version_and_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version"));
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("magic"));
    }
}
