//! Versioned checkpoint files: a magic header, a JSON metadata block, and a
//! self-describing table of named row-major f64 tensors (little-endian).
//! Model parameters, centroid memory and optimizer state all live in one
//! file so a run can resume from it.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OLTRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub version: u32,
    /// "full" or "plain".
    pub variant: String,
    /// Epochs completed when this checkpoint was written.
    pub epoch: usize,
    pub best_val_acc: Option<f64>,
    /// Flat-text snapshot of the configuration the run used.
    pub config_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub meta: CheckpointMeta,
    pub tensors: Vec<NamedTensor>,
}

impl CheckpointData {
    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn write_checkpoint(path: &Path, data: &CheckpointData) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&data.meta)?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(data.tensors.len() as u32).to_le_bytes());
    for tensor in &data.tensors {
        let name = tensor.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(tensor.shape.len() as u8);
        for &dim in &tensor.shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        let expected: usize = tensor.shape.iter().product();
        assert_eq!(tensor.data.len(), expected, "tensor {} shape mismatch", tensor.name);
        for &x in &tensor.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|_| Error::MissingArtifact(format!("checkpoint {}", path.display())))?
        .read_to_end(&mut bytes)?;
    let mut cursor = 0usize;

    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint {} truncated at byte {}",
                path.display(),
                cursor
            )));
        }
        let slice = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(slice)
    };

    if take(&mut cursor, 8)? != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} in {}",
            path.display()
        )));
    }
    let meta_len = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;
    let meta: CheckpointMeta = serde_json::from_slice(take(&mut cursor, meta_len)?)?;
    let count = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap()) as usize;

    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut cursor, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut cursor, name_len)?.to_vec())
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let ndim = take(&mut cursor, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut cursor, len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    Ok(CheckpointData {
        meta: CheckpointMeta { version, ..meta },
        tensors,
    })
}
