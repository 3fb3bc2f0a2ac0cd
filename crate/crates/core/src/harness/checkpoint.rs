//! Binary checkpoint: a JSON header followed by `(key, shape, f32 LE values)` records.
//!
//! Byte layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "COHDCKPT"
//! version      u32      1
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON {"model", "data", "seed", "steps", "n_params"}
//! n_params records, keys in ascending byte order:
//!   key_len    u32
//!   key        key_len bytes UTF-8
//!   ndim       u32
//!   dims       ndim × u64
//!   values     prod(dims) × f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

use super::model::DataShape;

pub const MAGIC: &[u8; 8] = b"COHDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub data: DataShape,
    pub seed: u64,
    pub steps: usize,
    pub n_params: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = serde_json::to_vec(&CheckpointHeader { n_params: self.params.len(), ..self.header.clone() })?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (key, t) in self.params.iter() {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                let f = v as f32;
                if f as f64 != v {
                    return Err(Error::Numeric(format!("{key} holds a value not representable as f32 ({v})")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = read_u64(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        read_exact(&mut r, &mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let mut params = ParamStore::new();
        for _ in 0..header.n_params {
            let key_len = read_u32(&mut r)? as usize;
            let mut key = vec![0u8; key_len];
            read_exact(&mut r, &mut key)?;
            let key = String::from_utf8(key).map_err(|e| Error::Format(format!("checkpoint key: {e}")))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 4];
                read_exact(&mut r, &mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
            params.insert(key, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after the last record", r.len())));
        }
        Ok(Self { header, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("checkpoint is truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("b.bias", Tensor::row(vec![0.5, -0.25]));
        params.insert("a.weight", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, f32::MIN_POSITIVE as f64]).unwrap());
        let data = DataShape { grid_hw: (32, 32), n_cell_classes: 13, vocab_size: 45, n_categories: 4 };
        Checkpoint { header: CheckpointHeader { model: ModelConfig::default(), data, seed: 3, steps: 0, n_params: 2 }, params }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), c);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn refuses_unrepresentable_values() {
        let mut c = sample();
        c.params.insert("x", Tensor::row(vec![0.1]));
        assert!(matches!(c.to_bytes(), Err(Error::Numeric(_))));
    }
}
