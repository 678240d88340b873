//! Versioned checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..4         | magic `PTFM`                              |
//! | 4..8         | format version, `u32`                     |
//! | 8..16        | header length `n`, `u64`                  |
//! | 16..16+n     | JSON header                               |
//! | 16+n..       | tensor payloads, contiguous               |
//!
//! The header holds the model and training configuration, the step count and
//! a manifest of `{name, shape, dtype, offset}` entries; `offset` counts from
//! the start of the payload region and `dtype` is `"f32"` or `"f64"`.
//! Optimizer moments, when present, are stored as `adam.m.<param>` and
//! `adam.v.<param>`.

use std::collections::HashMap;
use std::path::Path;

use patchfm_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{param_shapes, ModelConfig, ModelWeights};
use crate::train::optim::{OptimizerState, TrainConfig};

pub const MAGIC: &[u8; 4] = b"PTFM";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 16;
/// Parameters per encoder layer and outside the stack.
const PARAMS_PER_LAYER: usize = 16;
const PARAMS_OUTSIDE: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
    pub weights: ModelWeights,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: usize,
    optimizer_step: Option<u64>,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    offset: u64,
}

pub fn encode_checkpoint(ck: &Checkpoint, dtype: Dtype) -> Vec<u8> {
    let mut named: Vec<(String, &Tensor)> = ck.weights.tensors();
    if let Some(opt) = &ck.optimizer {
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        for (n, m) in names.iter().zip(&opt.m) {
            named.push((format!("adam.m.{n}"), m));
        }
        for (n, v) in names.iter().zip(&opt.v) {
            named.push((format!("adam.v.{n}"), v));
        }
    }
    let mut offset = 0u64;
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let e = ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype,
                offset,
            };
            offset += (t.numel() * dtype.size()) as u64;
            e
        })
        .collect();
    let header = Header {
        model: ck.model.clone(),
        train: ck.train.clone(),
        step: ck.step,
        optimizer_step: ck.optimizer.as_ref().map(|o| o.step),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &named {
        for &x in t.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX_LEN {
        return Err(Error::format(bytes.len() as u64, "file shorter than the fixed prefix"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::format(4, format!("unsupported format version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let payload_start = (PREFIX_LEN as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| Error::format(8, format!("header length {header_len} exceeds file")))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREFIX_LEN..payload_start])
        .map_err(|e| Error::format(PREFIX_LEN as u64, format!("bad header: {e}")))?;
    header
        .model
        .validate()
        .map_err(|e| Error::format(PREFIX_LEN as u64, format!("bad model config: {e}")))?;
    let payload = &bytes[payload_start..];

    // Bounds-check the manifest before allocating anything it describes.
    let mut by_name: HashMap<&str, &ManifestEntry> = HashMap::new();
    for e in &header.tensors {
        let size = e
            .shape
            .iter()
            .try_fold(e.dtype.size(), |acc, &d| acc.checked_mul(d))
            .and_then(|s| u64::try_from(s).ok());
        let fits = size
            .and_then(|s| e.offset.checked_add(s))
            .is_some_and(|end| end <= payload.len() as u64);
        if !fits {
            return Err(Error::format(
                payload_start as u64 + e.offset.min(payload.len() as u64),
                format!("tensor `{}` runs past the end of the file", e.name),
            ));
        }
        if by_name.insert(&e.name, e).is_some() {
            return Err(Error::format(PREFIX_LEN as u64, format!("duplicate tensor `{}`", e.name)));
        }
    }
    let expected = header
        .model
        .n_layer
        .checked_mul(PARAMS_PER_LAYER)
        .and_then(|n| n.checked_add(PARAMS_OUTSIDE));
    if expected.map_or(true, |n| n > header.tensors.len()) {
        return Err(Error::format(
            PREFIX_LEN as u64,
            "manifest has fewer tensors than the model configuration needs",
        ));
    }

    let read = |e: &ManifestEntry| -> Tensor {
        let start = e.offset as usize;
        let numel: usize = e.shape.iter().product();
        let data: Vec<f64> = match e.dtype {
            Dtype::F64 => payload[start..start + 8 * numel]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
            Dtype::F32 => payload[start..start + 4 * numel]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
        };
        Tensor::new(e.shape.clone(), data).expect("manifest shape")
    };
    let layout = param_shapes(&header.model);
    let fetch = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let e = by_name
            .get(name)
            .ok_or_else(|| Error::format(PREFIX_LEN as u64, format!("missing tensor `{name}`")))?;
        if e.shape != shape {
            return Err(Error::format(
                payload_start as u64 + e.offset,
                format!("tensor `{name}` has shape {:?}, expected {shape:?}", e.shape),
            ));
        }
        Ok(read(e))
    };
    let mut first_err = None;
    let weights: ModelWeights = layout.map(|name, shape| match fetch(name, shape) {
        Ok(t) => t,
        Err(e) => {
            first_err.get_or_insert(e);
            Tensor::zeros(&[0])
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }

    let optimizer = match header.optimizer_step {
        None => None,
        Some(step) => {
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (name, t) in weights.tensors() {
                m.push(fetch(&format!("adam.m.{name}"), t.shape())?);
                v.push(fetch(&format!("adam.v.{name}"), t.shape())?);
            }
            Some(OptimizerState { step, m, v })
        }
    };
    Ok(Checkpoint {
        model: header.model,
        train: header.train,
        step: header.step,
        weights,
        optimizer,
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint, dtype: Dtype) -> Result<()> {
    let bytes = encode_checkpoint(ck, dtype);
    let path = path.as_ref();
    let tmp = path.with_extension("ptfm.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and checks it against the configuration the caller
/// intends to use.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    ck.model.check_matches(expected)?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_count_constants_match_the_model() {
        for n_layer in 0..4 {
            let cfg = ModelConfig {
                n_layer,
                ..ModelConfig::default()
            };
            let mut n = 0;
            param_shapes(&cfg).map(|_, _| n += 1);
            assert_eq!(n, n_layer * PARAMS_PER_LAYER + PARAMS_OUTSIDE, "n_layer {n_layer}");
        }
    }
}
