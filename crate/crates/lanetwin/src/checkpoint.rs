//! Checkpoint files: an 8-byte magic, a little-endian `u64` header length,
//! a JSON [`CheckpointHeader`], then every parameter array as
//! little-endian `f64` in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use lanetwin_core::harness::TrainConfig;
use lanetwin_core::twins::{make_variant, TwinConfig, TwinModel, Variant};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

pub const MAGIC: &[u8; 8] = b"LTWCKPT1";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dtype: String,
    pub variant: Option<Variant>,
    pub config: TwinConfig,
    pub train: Option<TrainConfig>,
    /// Optimiser steps taken when the checkpoint was selected.
    pub step: usize,
    pub epoch: usize,
    pub arrays: Vec<ArrayEntry>,
}

pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: TwinModel,
}

pub fn save(path: &Path, model: &TwinModel, train: Option<&TrainConfig>, step: usize, epoch: usize) -> Result<()> {
    let mut offset = 0;
    let arrays = model
        .params
        .iter()
        .map(|p| {
            let e = ArrayEntry {
                name: p.name.clone(),
                shape: p.value.shape.clone(),
                offset,
            };
            offset += p.value.len();
            e
        })
        .collect();
    let header = CheckpointHeader {
        dtype: "f64le".into(),
        variant: Variant::of(&model.config),
        config: model.config.clone(),
        train: train.cloned(),
        step,
        epoch,
        arrays,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json(path, None, e))?;
    let mut w = io::create(path)?;
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&(json.len() as u64).to_le_bytes())?;
    put(&json)?;
    for p in model.params.iter() {
        for v in &p.value.data {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| Error::json(path, None, e))?;
    if header.dtype != "f64le" {
        return Err(bad(format!("unsupported dtype `{}`", header.dtype)));
    }
    let data = &bytes[16 + len..];
    if data.len() % 8 != 0 {
        return Err(bad("data section is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut model = make_variant(&header.config)?;
    if model.params.len() != header.arrays.len() {
        return Err(bad(format!(
            "header lists {} arrays, the configured model has {}",
            header.arrays.len(),
            model.params.len()
        )));
    }
    for (p, a) in model.params.iter_mut().zip(&header.arrays) {
        if p.name != a.name || p.value.shape != a.shape {
            return Err(bad(format!(
                "array `{}` {:?} does not match model parameter `{}` {:?}",
                a.name, a.shape, p.name, p.value.shape
            )));
        }
        let src = values
            .get(a.offset..a.offset + p.value.len())
            .ok_or_else(|| bad(format!("array `{}` runs past the data section", a.name)))?;
        p.value.data.copy_from_slice(src);
    }
    Ok(Checkpoint { header, model })
}
