//! Checkpoint file: a little-endian u32 header length, a JSON header with the
//! model config, a format version and a tensor manifest of (name, shape,
//! byte offset), then contiguous float32 tensor data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::autograd::Mat;
use super::params::ParamSet;
use super::{CaptureModel, ModelConfig};
use crate::error::{CoreError, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save(model: &CaptureModel, path: &Path) -> Result<()> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut offset = 0u64;
    for (name, t) in model.params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: [t.nrows(), t.ncols()],
            offset,
        });
        offset += (t.nrows() * t.ncols() * 4) as u64;
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in model.params.iter() {
        for &v in t.iter() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<CaptureModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CoreError::Format(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    header.config.validate()?;

    let mut data = Vec::new();
    r.read_to_end(&mut data)?;

    let mut params = ParamSet::new();
    for entry in &header.tensors {
        let count = entry.shape[0] * entry.shape[1];
        let start = entry.offset as usize;
        let end = start + count * 4;
        if end > data.len() {
            return Err(CoreError::Format(format!(
                "tensor {} exceeds checkpoint data section",
                entry.name
            )));
        }
        let mut values = Vec::with_capacity(count);
        for chunk in data[start..end].chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        let t = Mat::from_shape_vec((entry.shape[0], entry.shape[1]), values)
            .map_err(|e| CoreError::Format(format!("tensor {}: {e}", entry.name)))?;
        params.insert(&entry.name, t);
    }

    // The manifest must cover exactly the parameters the config implies.
    let expected = CaptureModel::new(header.config.clone())?;
    for (name, t) in expected.params.iter() {
        match params.index_of(name) {
            Some(idx) if params.tensor(idx).raw_dim() == t.raw_dim() => {}
            _ => {
                return Err(CoreError::Format(format!(
                    "checkpoint missing or mis-shaped tensor {name}"
                )))
            }
        }
    }
    if params.len() != expected.params.len() {
        return Err(CoreError::Format("checkpoint has extra tensors".into()));
    }

    Ok(CaptureModel {
        config: header.config,
        params,
    })
}
