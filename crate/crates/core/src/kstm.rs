//! KSTM tensor container.
//!
//! Little-endian layout:
//!
//! ```text
//! "KSTM"  u32 version=1  f32 alpha  f32 beta  u8 variant  u32 tensor_count
//! per tensor: u16 name_len, name bytes, u8 rank, u32 dims[rank], f32 payload
//! u32 CRC32 of every byte after the magic
//! ```
//!
//! Model files, extractor weights and optimizer sidecars all share it.

use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"KSTM";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KstmError {
    #[error("bad magic {0:02x?}, expected \"KSTM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported container version {0}, expected {VERSION}")]
    VersionMismatch(u32),
    #[error("truncated container while reading {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("tensor name is not valid UTF-8")]
    InvalidName,
    #[error("tensor {name}: payload of {payload} values does not match dims {dims:?}")]
    PayloadSize {
        name: String,
        dims: Vec<u32>,
        payload: usize,
    },
    #[error("missing tensor \"{0}\"")]
    MissingTensor(String),
    #[error("unexpected tensor \"{0}\"")]
    UnexpectedTensor(String),
    #[error("tensor \"{name}\": expected dims {expected:?}, found {actual:?}")]
    TensorShape {
        name: String,
        expected: Vec<u32>,
        actual: Vec<u32>,
    },
    #[error("invalid header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u32>, data: Vec<f32>) -> Self {
        NamedTensor {
            name: name.into(),
            dims,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub alpha: f32,
    pub beta: f32,
    pub variant: u8,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Looks up a tensor and checks its dims.
    pub fn expect(&self, name: &str, dims: &[u32]) -> Result<&NamedTensor, KstmError> {
        let t = self
            .get(name)
            .ok_or_else(|| KstmError::MissingTensor(name.to_string()))?;
        if t.dims != dims {
            return Err(KstmError::TensorShape {
                name: name.to_string(),
                expected: dims.to_vec(),
                actual: t.dims.clone(),
            });
        }
        Ok(t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload: usize = self.tensors.iter().map(|t| 4 * t.data.len() + 7 + t.name.len() + 4 * t.dims.len()).sum();
        let mut out = Vec::with_capacity(25 + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        out.extend_from_slice(&self.beta.to_le_bytes());
        out.push(self.variant);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[4..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, KstmError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != MAGIC {
            return Err(KstmError::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(KstmError::VersionMismatch(version));
        }
        let alpha = r.f32("alpha")?;
        let beta = r.f32("beta")?;
        let variant = r.take(1, "variant")?[0];
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let name_len = u16::from_le_bytes(r.take(2, &format!("tensor {i} name length"))?.try_into().unwrap());
            let name = std::str::from_utf8(r.take(name_len as usize, &format!("tensor {i} name"))?)
                .map_err(|_| KstmError::InvalidName)?
                .to_string();
            let rank = r.take(1, &format!("{name} rank"))?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32(&format!("{name} dims"))?);
            }
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let numel = numel.ok_or_else(|| KstmError::Truncated(format!("{name} payload")))?;
            let raw = r.take(
                numel.checked_mul(4).ok_or_else(|| KstmError::Truncated(format!("{name} payload")))?,
                &format!("{name} payload"),
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        let body_end = r.pos;
        let stored = r.u32("checksum")?;
        if r.pos != bytes.len() {
            return Err(KstmError::Header(format!(
                "{} trailing bytes after checksum",
                bytes.len() - r.pos
            )));
        }
        let computed = crc32fast::hash(&bytes[4..body_end]);
        if stored != computed {
            return Err(KstmError::Checksum { stored, computed });
        }
        Ok(Container {
            alpha,
            beta,
            variant,
            tensors,
        })
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), KstmError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self, KstmError> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], KstmError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| KstmError::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, KstmError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32, KstmError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
