//! Checkpoint container.
//!
//! Layout: 8-byte magic `LAUDCKPT`, `u32` format version, `u64` header length,
//! a JSON header (config, dtype, epoch, tensor directory, free-form training
//! metadata), then the little-endian tensor payload. All integers are
//! little-endian.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutoencoderConfig, AutoencoderModel};
use crate::error::{Error, Result};
use crate::io_util::{read_file, write_atomic};
use crate::tensor::{AdamState, Dtype, Scalar, Tensor};

const MAGIC: &[u8; 8] = b"LAUDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: AutoencoderModel<T>,
    /// Completed training epochs.
    pub epoch: usize,
    /// Adam state per parameter, in [`AutoencoderModel::parameters`] order.
    pub optimizer: Option<Vec<AdamState<T>>>,
    /// Training metadata (loss history and similar).
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: AutoencoderConfig,
    dtype: Dtype,
    epoch: usize,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    extra: serde_json::Value,
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, shape: &[usize], data: &[T]| {
        tensors.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset: payload.len(),
        });
        for &v in data {
            v.write_le(&mut payload);
        }
    };
    let params = ckpt.model.parameters();
    for (name, p) in &params {
        push(name.clone(), p.shape(), p.data());
    }
    let mut optimizer_step = None;
    if let Some(states) = &ckpt.optimizer {
        if states.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer has {} states for {} parameters",
                states.len(),
                params.len()
            )));
        }
        optimizer_step = states.first().map(|s| s.step);
        for ((name, p), state) in params.iter().zip(states) {
            push(format!("adam.m.{name}"), p.shape(), &state.m);
            push(format!("adam.v.{name}"), p.shape(), &state.v);
        }
    }
    let header = Header {
        config: ckpt.model.config.clone(),
        dtype: T::DTYPE,
        epoch: ckpt.epoch,
        optimizer_step,
        tensors,
        extra: ckpt.extra.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    write_atomic(path, &out)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = read_file(path)?;
    let bad = |msg: &str| Error::format(path, msg);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..header_end])
        .map_err(|e| bad(&format!("invalid header: {e}")))?;
    let payload = &bytes[header_end..];
    let elem = header.dtype.size();

    let by_name: HashMap<&str, &TensorEntry> =
        header.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let read = |name: &str, shape: &[usize]| -> Result<Vec<T>> {
        let entry = by_name
            .get(name)
            .ok_or_else(|| bad(&format!("missing tensor {name}")))?;
        if entry.shape != shape {
            return Err(bad(&format!(
                "tensor {name} has shape {:?}, architecture needs {shape:?}",
                entry.shape
            )));
        }
        let len: usize = shape.iter().product();
        let end = entry.offset + len * elem;
        if end > payload.len() {
            return Err(bad(&format!("tensor {name} runs past end of file")));
        }
        Ok(payload[entry.offset..end]
            .chunks_exact(elem)
            .map(|c| T::from_f64(header.dtype.decode(c)))
            .collect())
    };

    let mut model = AutoencoderModel::<T>::zeros(&header.config)?;
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(model.parameters_mut()) {
        let data = read(name, p.shape())?;
        *p = Tensor::new(p.shape().to_vec(), data)?;
    }

    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let mut states = Vec::with_capacity(names.len());
            for (name, p) in model.parameters() {
                states.push(AdamState {
                    m: read(&format!("adam.m.{name}"), p.shape())?,
                    v: read(&format!("adam.v.{name}"), p.shape())?,
                    step,
                });
            }
            Some(states)
        }
    };

    Ok(Checkpoint {
        model,
        epoch: header.epoch,
        optimizer,
        extra: header.extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    #[test]
    fn roundtrip_with_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model: AutoencoderModel<f32> =
            build_model(&AutoencoderConfig::new((1, 8, 8), 1, 2), 4).unwrap();
        let optimizer = model
            .parameters()
            .iter()
            .map(|(_, p)| AdamState {
                m: vec![0.25; p.len()],
                v: vec![0.5; p.len()],
                step: 7,
            })
            .collect();
        let ckpt = Checkpoint {
            model,
            epoch: 3,
            optimizer: Some(optimizer),
            extra: serde_json::json!({"note": "x"}),
        };
        save_checkpoint(&path, &ckpt).unwrap();
        let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(Error::Format { .. })));
    }
}
