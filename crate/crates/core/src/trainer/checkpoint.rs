//! Binary checkpoint container: magic, version, a JSON config block and
//! named little-endian f64 tensors (`raw/…` and `ema/…`).

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::diffmath::Tensor;
use crate::machine::{ModelConfig, NsmModel, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NSMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub raw: ParamSet,
    pub ema: ParamSet,
}

impl Checkpoint {
    pub fn model(&self) -> Result<NsmModel, TrainError> {
        Ok(NsmModel::from_parts(
            self.model_config.clone(),
            self.raw.clone(),
        )?)
    }

    /// Parameters used for evaluation: EMA unless `ema` is false.
    pub fn eval_params(&self, ema: bool) -> &ParamSet {
        if ema {
            &self.ema
        } else {
            &self.raw
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&Header {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
        })?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let blocks: Vec<(String, &Tensor)> = self
            .raw
            .iter()
            .map(|(n, t)| (format!("raw/{n}"), t))
            .chain(self.ema.iter().map(|(n, t)| (format!("ema/{n}"), t)))
            .collect();
        out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
        for (name, t) in blocks {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(TrainError::Checkpoint(
                "not a checkpoint file (bad magic)".into(),
            ));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = read_u64(&mut r)? as usize;
        let mut header = vec![0u8; len];
        read_exact(&mut r, &mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let count = read_u32(&mut r)?;
        let (mut raw, mut ema) = (ParamSet::new(), ParamSet::new());
        for _ in 0..count {
            let n = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; n];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| TrainError::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let size: usize = shape.iter().product();
            let data = (0..size)
                .map(|_| read_u64(&mut r).map(f64::from_bits))
                .collect::<Result<Vec<_>, _>>()?;
            let t = Tensor::new(shape, data)?;
            if let Some(rest) = name.strip_prefix("raw/") {
                raw.push(rest, t);
            } else if let Some(rest) = name.strip_prefix("ema/") {
                ema.push(rest, t);
            } else {
                return Err(TrainError::Checkpoint(format!(
                    "unexpected tensor block `{name}`"
                )));
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(TrainError::Checkpoint(
                "trailing bytes after last tensor".into(),
            ));
        }
        if raw.names() != ema.names() {
            return Err(TrainError::Checkpoint("raw and EMA tensors differ".into()));
        }
        Ok(Self {
            model_config: header.model,
            train_config: header.train,
            raw,
            ema,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        fs::write(path, self.to_bytes()?).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<(), TrainError> {
    r.read_exact(buf)
        .map_err(|_| TrainError::Checkpoint("truncated checkpoint".into()))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32, TrainError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64, TrainError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
