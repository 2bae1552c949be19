//! `model.ckpt`: one JSON header line, then every parameter as raw
//! little-endian f64 values in manifest order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use disenpoi_autodiff::Tensor;
use serde::{Deserialize, Serialize};

use super::{parameter_layout, Model, ModelConfig, ModelError, Result};
use crate::bundle::write_atomic;

pub const CHECKPOINT_FORMAT: &str = "disenpoi-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub parameters: Vec<ManifestEntry>,
    /// Free-form provenance (seed, epoch, data hashes).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub fn write_checkpoint(mut w: impl Write, model: &Model, metadata: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        config: model.config.clone(),
        parameters: model
            .params
            .iter()
            .map(|p| ManifestEntry {
                name: p.name.clone(),
                rows: p.tensor.rows(),
                cols: p.tensor.cols(),
            })
            .collect(),
        metadata,
    };
    let line = serde_json::to_string(&header).map_err(|e| ModelError::MalformedCheckpoint(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for p in model.params.iter() {
        let mut buf = Vec::with_capacity(p.tensor.len() * 8);
        for v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<(CheckpointHeader, Model)> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| ModelError::MalformedCheckpoint(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(ModelError::MalformedCheckpoint(format!("unknown format {:?}", header.format)));
    }
    let expected = parameter_layout(&header.config);
    if expected.len() != header.parameters.len() {
        return Err(ModelError::ManifestMismatch(format!(
            "expected {} parameters, header lists {}",
            expected.len(),
            header.parameters.len()
        )));
    }
    for ((name, shape), entry) in expected.iter().zip(&header.parameters) {
        if *name != entry.name || *shape != (entry.rows, entry.cols) {
            return Err(ModelError::ManifestMismatch(format!(
                "expected {name} {shape:?}, header lists {} ({}, {})",
                entry.name, entry.rows, entry.cols
            )));
        }
    }
    let mut failure = None;
    let model = Model::with_values(header.config.clone(), |_, (rows, cols)| {
        let mut buf = vec![0u8; rows * cols * 8];
        if failure.is_none() {
            if let Err(e) = r.read_exact(&mut buf) {
                failure = Some(e);
            }
        }
        let data = buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(rows, cols, data).expect("buffer sized from shape")
    })?;
    if let Some(e) = failure {
        return Err(ModelError::MalformedCheckpoint(format!("truncated parameter data: {e}")));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(ModelError::MalformedCheckpoint("trailing bytes after parameters".into()));
    }
    Ok((header, model))
}

/// Writes atomically: a crash never leaves a partial file at `path`.
pub fn save_checkpoint(path: &Path, model: &Model, metadata: serde_json::Value) -> Result<()> {
    write_atomic(path, |f| write_checkpoint(BufWriter::new(f), model, metadata))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, Model)> {
    read_checkpoint(File::open(path)?)
}
