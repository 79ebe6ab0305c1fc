use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamWConfig, OptimState};
use super::TrainConfig;
use crate::error::{HrstError, Result};
use crate::topology::{ModelConfig, ModelParams, ParamTensor};
use crate::volume_io::{read_raw, write_raw, RawBlob};

pub const CKPT_MAGIC: [u8; 8] = *b"HRSTCKPT";
pub const CKPT_VERSION: u32 = 1;

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub optim: OptimState,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken; the schedule position.
    pub step: u64,
    pub best_val_dsc: Option<f64>,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    optim: AdamWConfig,
    optim_step: u64,
    epoch: usize,
    step: u64,
    best_val_dsc: Option<f64>,
    train: Option<TrainConfig>,
    tensors: Vec<(String, Vec<usize>)>,
}

fn blob(data: &[f32]) -> RawBlob {
    RawBlob::from_f32(1, [1, 1, data.len()], [1.0; 3], data)
}

fn write_named(out: &mut Vec<u8>, name: &str, data: &[f32]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    write_raw(&mut *out, &blob(data)).expect("writing to memory");
}

fn read_u32(r: &mut Cursor<&[u8]>, field: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| HrstError::format(field, "unexpected end of checkpoint"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_named(r: &mut Cursor<&[u8]>, expect: &str, len: usize) -> Result<Vec<f32>> {
    let n = read_u32(r, "tensor_name")? as usize;
    let mut name = vec![0u8; n];
    r.read_exact(&mut name)
        .map_err(|_| HrstError::format("tensor_name", "unexpected end of checkpoint"))?;
    if name != expect.as_bytes() {
        return Err(HrstError::format(
            "tensor_name",
            format!(
                "expected {expect}, found {}",
                String::from_utf8_lossy(&name)
            ),
        ));
    }
    let data = read_raw(&mut *r)?.to_f32()?;
    if data.len() != len {
        return Err(HrstError::format(
            "payload_length",
            format!("{expect}: expected {len} values, found {}", data.len()),
        ));
    }
    Ok(data)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            model: self.model.clone(),
            optim: self.optim.config,
            optim_step: self.optim.step,
            epoch: self.epoch,
            step: self.step,
            best_val_dsc: self.best_val_dsc,
            train: self.train.clone(),
            tensors: self
                .params
                .tensors()
                .iter()
                .map(|t| (t.name.clone(), t.shape.clone()))
                .collect(),
        };
        let json = serde_json::to_vec(&meta).expect("checkpoint metadata serialises");
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (i, t) in self.params.tensors().iter().enumerate() {
            write_named(&mut out, &t.name, &t.data);
            write_named(&mut out, &format!("adam.m.{}", t.name), &self.optim.m[i]);
            write_named(&mut out, &format!("adam.v.{}", t.name), &self.optim.v[i]);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| HrstError::format("magic", "file too short"))?;
        if magic != CKPT_MAGIC {
            return Err(HrstError::format("magic", "not a checkpoint"));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CKPT_VERSION {
            return Err(HrstError::format(
                "version",
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let n = read_u32(&mut r, "metadata")? as usize;
        let mut json = vec![0u8; n];
        r.read_exact(&mut json)
            .map_err(|_| HrstError::format("metadata", "unexpected end of checkpoint"))?;
        let meta: Meta = serde_json::from_slice(&json)
            .map_err(|e| HrstError::format("metadata", e.to_string()))?;
        meta.model.validate()?;

        let mut tensors = Vec::with_capacity(meta.tensors.len());
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for (name, shape) in &meta.tensors {
            let len = shape.iter().product();
            let data = read_named(&mut r, name, len)?;
            m.push(read_named(&mut r, &format!("adam.m.{name}"), len)?);
            v.push(read_named(&mut r, &format!("adam.v.{name}"), len)?);
            tensors.push(ParamTensor {
                name: name.clone(),
                shape: shape.clone(),
                data,
            });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(HrstError::format(
                "payload_length",
                "trailing bytes after checkpoint",
            ));
        }
        let params = ModelParams::from_tensors(tensors)?;
        params.check_layout(&crate::topology::param_layout(&meta.model)?)?;
        Ok(Self {
            model: meta.model,
            params,
            optim: OptimState {
                config: meta.optim,
                step: meta.optim_step,
                m,
                v,
            },
            epoch: meta.epoch,
            step: meta.step,
            best_val_dsc: meta.best_val_dsc,
            train: meta.train,
        })
    }
}

/// Writes to a temporary sibling first, so a crash never leaves a half-written checkpoint.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| HrstError::io(&tmp, e))?;
    f.write_all(&ckpt.to_bytes())
        .map_err(|e| HrstError::io(&tmp, e))?;
    f.sync_all().map_err(|e| HrstError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HrstError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| HrstError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
