//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes  "FFCK"
//! version      u16      currently 1
//! count        u32      number of tensors
//! count x {
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   rank       u8
//!   dims       rank x u32
//!   dtype      u8       1 = f64
//! }
//! payloads     f64 values of every tensor, in header order
//! ```
//!
//! Tensor `config.model` holds `[patch_size, c_d, seed_hi, seed_lo, enc_channels...]` so
//! the architecture can be rebuilt before the weights are read. Prototypes
//! are stored as `proto.flame` / `proto.noflame` when present.

use std::path::Path;

use thiserror::Error;

use crate::dml::PrototypePair;
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"FFCK";
pub const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub prototypes: Option<PrototypePair>,
}

struct Entry {
    name: String,
    dims: Vec<usize>,
    data: Vec<f64>,
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

impl Checkpoint {
    fn entries(&self) -> Vec<Entry> {
        let cfg = &self.params.config;
        let seed = self.params.seed;
        let mut meta = vec![
            cfg.patch_size as f64,
            cfg.c_d as f64,
            (seed >> 32) as f64,
            (seed & 0xffff_ffff) as f64,
        ];
        meta.extend(cfg.enc_channels.iter().map(|&c| c as f64));
        let mut out = vec![Entry {
            name: "config.model".into(),
            dims: vec![meta.len()],
            data: meta,
        }];
        out.extend(self.params.tensors().into_iter().map(|t| Entry {
            name: t.name,
            dims: t.dims,
            data: t.data.to_vec(),
        }));
        if let Some(p) = &self.prototypes {
            for (name, v) in [("proto.flame", &p.flame), ("proto.noflame", &p.noflame)] {
                out.push(Entry {
                    name: name.into(),
                    dims: vec![v.len()],
                    data: v.clone(),
                });
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for e in &entries {
            buf.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            buf.extend_from_slice(e.name.as_bytes());
            buf.push(e.dims.len() as u8);
            for &d in &e.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            buf.push(DTYPE_F64);
        }
        for e in &entries {
            for v in &e.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = u32::from_le_bytes(r.array()?) as usize;
        let mut headers = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.array()?) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| corrupt("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(r.array()?) as usize);
            }
            if r.take(1)?[0] != DTYPE_F64 {
                return Err(corrupt(format!("tensor {name} has unknown dtype")));
            }
            headers.push((name, dims));
        }
        let mut entries = Vec::with_capacity(headers.len());
        for (name, dims) in headers {
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<Entry>) -> Result<Self> {
        let mut it = entries.into_iter();
        let meta = it.next().filter(|e| e.name == "config.model").ok_or_else(|| corrupt("missing config.model"))?;
        if meta.data.len() < 5 || meta.data.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(corrupt("malformed config.model"));
        }
        let config = ModelConfig {
            patch_size: meta.data[0] as usize,
            c_d: meta.data[1] as usize,
            enc_channels: meta.data[4..].iter().map(|&v| v as usize).collect(),
        };
        let mut params = ModelParams::zeros(&config).map_err(|e| corrupt(e.to_string()))?;
        params.seed = ((meta.data[2] as u64) << 32) | meta.data[3] as u64;
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|t| (t.name, t.dims)).collect();
        for (slot, (name, dims)) in params.tensors_mut().into_iter().zip(expected) {
            let e = it.next().ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if e.name != name || e.dims != dims {
                return Err(corrupt(format!("expected {name} {dims:?}, found {} {:?}", e.name, e.dims)));
            }
            *slot = e.data;
        }
        let rest: Vec<Entry> = it.collect();
        let prototypes = match rest.as_slice() {
            [] => None,
            [f, n] if f.name == "proto.flame" && n.name == "proto.noflame" => {
                if f.data.len() != config.c_d || n.data.len() != config.c_d {
                    return Err(corrupt("prototype length differs from c_d"));
                }
                Some(PrototypePair {
                    flame: f.data.clone(),
                    noflame: n.data.clone(),
                })
            }
            _ => return Err(corrupt("unexpected trailing tensors")),
        };
        Ok(Self { params, prototypes })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::util::write_atomic(path.as_ref(), &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let cfg = ModelConfig {
            patch_size: 8,
            c_d: 4,
            enc_channels: vec![2, 3],
        };
        Checkpoint {
            params: init_params(u64::MAX - 4, &cfg).unwrap(),
            prototypes: Some(PrototypePair::new(vec![0.1, -0.2, 0.3, 1e-300], vec![5.0; 4]).unwrap()),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"FFCK");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let name_len = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
        assert_eq!(&bytes[12..12 + name_len], b"config.model");
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Corrupt(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::Corrupt(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(CheckpointError::UnsupportedVersion(2))
        ));
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ffck");
        let ck = Checkpoint {
            prototypes: None,
            ..sample()
        };
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }
}
