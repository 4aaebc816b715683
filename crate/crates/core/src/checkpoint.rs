//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "EGCKPT\0\0"
//! version    u32
//! config     u64 length + UTF-8 JSON
//! digest     32 bytes SHA-256 of the config JSON
//! epoch      u64
//! count      u32
//! tensors    count × (u32 name length, name, u8 dtype, u32 rank, rank × u64 dims, raw data)
//! checksum   32 bytes SHA-256 of everything above
//! ```
//!
//! dtype codes: 0 = f32, 1 = f64.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::tensor_bytes;

pub const MAGIC: &[u8; 8] = b"EGCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;
/// Byte offset of the version field, for tooling that patches headers.
pub const VERSION_OFFSET: usize = 8;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: usize,
    pub tensors: Vec<(String, Tensor)>,
}

fn dtype_code(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::invalid(format!("cannot store {other:?} tensors"))),
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let json = self.config.to_json()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&Sha256::digest(json.as_bytes()));
        out.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(dtype_code(t.dtype())?);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&tensor_bytes(t)?);
        }
        let checksum = Sha256::digest(&out);
        out.extend_from_slice(&checksum);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let mut r = Reader {
            bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 32 {
            return Err(corrupt("truncated"));
        }
        let (body, checksum) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != checksum {
            return Err(corrupt("checksum mismatch"));
        }
        r.bytes = body;
        let json_len = r.u64().ok_or_else(|| corrupt("truncated config"))? as usize;
        let json = r.take(json_len).ok_or_else(|| corrupt("truncated config"))?;
        let digest = r.take(32).ok_or_else(|| corrupt("truncated digest"))?;
        if Sha256::digest(json).as_slice() != digest {
            log::warn!("{}: config digest mismatch; the stored config may have been edited", path.display());
        }
        let json = std::str::from_utf8(json).map_err(|_| corrupt("config is not UTF-8"))?;
        let config = TrainConfig::from_json(json)?;
        let epoch = r.u64().ok_or_else(|| corrupt("truncated epoch"))? as usize;
        let count = r.u32().ok_or_else(|| corrupt("truncated tensor count"))? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let t = r.tensor().ok_or_else(|| corrupt("truncated tensor record"))?;
            tensors.push(t.map_err(|e| corrupt(&e))?);
        }
        if r.pos != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self { config, epoch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        // write-then-rename so a crash never leaves a half-written file
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }

    fn tensor(&mut self) -> Option<std::result::Result<(String, Tensor), String>> {
        let name_len = self.u32()? as usize;
        let name = match std::str::from_utf8(self.take(name_len)?) {
            Ok(s) => s.to_string(),
            Err(_) => return Some(Err("tensor name is not UTF-8".into())),
        };
        let code = *self.take(1)?.first()?;
        let rank = self.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Option<_>>()?;
        let n: usize = dims.iter().product();
        let t = match code {
            0 => {
                let raw = self.take(n.checked_mul(4)?)?;
                let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)
            }
            1 => {
                let raw = self.take(n.checked_mul(8)?)?;
                let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                Tensor::from_vec(v, dims, &Device::Cpu)
            }
            other => return Some(Err(format!("{name}: unknown dtype code {other}"))),
        };
        Some(t.map(|t| (name, t)).map_err(|e| e.to_string()))
    }
}
