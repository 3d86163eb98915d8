//! Versioned binary checkpoint container.
//!
//! ```text
//! magic     8 bytes "VIDCKPT\0"
//! version   u32
//! header    u32 length + UTF-8 JSON {config, epoch, step, val, provenance}
//! tensors   u32 count, then per tensor:
//!           u32 name length, name, u32 rank, rank x u64 dims, f32 data
//! ```
//!
//! Integers and floats are little-endian. Tensor names are prefixed with the
//! network role (`online.`, `predictor.`, `target.`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{Cursor, EmbedError};
use crate::model::{Model, ModelError, SiluLinear};
use crate::nn::{Param, Parameters};
use crate::rng;
use crate::train::{Checkpoint, TrainConfig, ValMetrics};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"VIDCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<EmbedError> for CheckpointError {
    fn from(e: EmbedError) -> Self {
        CheckpointError::Format(e.to_string())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    step: usize,
    val: Option<ValMetrics>,
    provenance: String,
}

fn tensors(ck: &Checkpoint) -> Vec<(String, &Param<f32>)> {
    let mut out: Vec<(String, &Param<f32>)> = ck
        .online
        .params()
        .into_iter()
        .map(|p| (format!("online.{}", p.name), p))
        .collect();
    if let Some(p) = &ck.predictor {
        out.extend(p.params().into_iter().map(|p| (format!("predictor.{}", p.name), p)));
    }
    if let Some(t) = &ck.target {
        out.extend(t.params().into_iter().map(|p| (format!("target.{}", p.name), p)));
    }
    out
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let header = serde_json::to_string(&Header {
        config: ck.config.clone(),
        epoch: ck.epoch,
        step: ck.step,
        val: ck.val.clone(),
        provenance: ck.provenance.clone(),
    })
    .expect("checkpoint header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let ts = tensors(ck);
    out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for (name, p) in ts {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn fill(
    params: Vec<&mut Param<f32>>,
    prefix: &str,
    stored: &mut std::collections::HashMap<String, (Vec<usize>, Vec<f32>)>,
) -> Result<(), CheckpointError> {
    for p in params {
        let key = format!("{prefix}.{}", p.name);
        let (shape, data) = stored
            .remove(&key)
            .ok_or_else(|| CheckpointError::Format(format!("missing tensor {key}")))?;
        if shape != p.shape {
            return Err(CheckpointError::Format(format!(
                "tensor {key} has shape {shape:?}, expected {:?}",
                p.shape
            )));
        }
        p.data = data;
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let hlen = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(hlen)?)
        .map_err(|e| CheckpointError::Format(format!("header: {e}")))?;
    let count = cur.u32()? as usize;
    let mut stored = std::collections::HashMap::with_capacity(count);
    for _ in 0..count {
        let nlen = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(nlen)?.to_vec())
            .map_err(|_| CheckpointError::Format("tensor name is not UTF-8".into()))?;
        let rank = cur.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        stored.insert(name, (shape, data));
    }
    if !cur.rest().is_empty() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }

    let cfg = &header.config;
    let mut online: Model<f32> = Model::new(&cfg.model, 0)?;
    fill(online.params_mut(), "online", &mut stored)?;
    let d = cfg.model.projection_dim;
    let mut predictor = None;
    if stored.keys().any(|k| k.starts_with("predictor.")) {
        let mut p = SiluLinear::new("predictor", d, d, cfg.loss.byol_normalize, &mut rng::seeded(0));
        fill(p.params_mut(), "predictor", &mut stored)?;
        predictor = Some(p);
    }
    let mut target = None;
    if stored.keys().any(|k| k.starts_with("target.")) {
        let mut t: Model<f32> = Model::new(&cfg.model, 0)?;
        fill(t.params_mut(), "target", &mut stored)?;
        target = Some(t);
    }
    if let Some(k) = stored.keys().next() {
        return Err(CheckpointError::Format(format!("unexpected tensor {k}")));
    }
    Ok(Checkpoint {
        config: header.config,
        epoch: header.epoch,
        step: header.step,
        val: header.val,
        online,
        predictor,
        target,
        provenance: header.provenance,
    })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(ck)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
