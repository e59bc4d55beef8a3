//! Binary checkpoint files. Layout, all integers little endian:
//!
//! ```text
//! magic "CAPM" | u32 version | u32 meta_len | meta JSON | u32 count
//! then per parameter, in registration order:
//! u32 name_len | name | u32 rank | u32 dims.. | f32 values..
//! ```
//!
//! The JSON metadata carries the model configuration, the feature
//! standardization constants, and a training summary, so a checkpoint is
//! sufficient to rebuild the predictor and evaluate it consistently.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, PredictorParams};
use crate::error::{Error, Result};
use crate::map::sample::StandardizationStats;
use crate::tensor::ParamSet;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CAPM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    /// Absent when training ran without a validation split (JSON cannot
    /// carry the NaN a float would need).
    pub best_val_ade: Option<f64>,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub stats: StandardizationStats,
    pub train: TrainSummary,
}

pub fn save_checkpoint(path: &Path, meta: &CheckpointMeta, params: &ParamSet) -> Result<()> {
    let meta_json =
        serde_json::to_vec(meta).map_err(|e| Error::checkpoint(path, format!("encoding metadata: {e}")))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);

    w.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&meta_json).map_err(io)?;
    w.write_all(&(params.len() as u32).to_le_bytes()).map_err(io)?;
    for (name, tensor) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&(tensor.shape.len() as u32).to_le_bytes()).map_err(io)?;
        for &d in &tensor.shape {
            w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in &tensor.data {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

struct Reader<'a> {
    inner: BufReader<File>,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::checkpoint(self.path, format!("file ends inside {what}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads a checkpoint and reconstructs the parameter set. Every tensor the
/// model configuration defines must be present with its exact shape; extra,
/// missing, or trailing data is an error.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamSet, PredictorParams)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
        path,
    };

    let magic = r.bytes(4, "the magic header")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint(path, format!("bad magic {:02x?}", magic)));
    }
    let version = r.u32("the version field")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(
            path,
            format!("version {version} unsupported, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let meta_len = r.u32("the metadata length")? as usize;
    let meta_json = r.bytes(meta_len, "the metadata block")?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_json)
        .map_err(|e| Error::checkpoint(path, format!("decoding metadata: {e}")))?;
    meta.model
        .validate()
        .map_err(|e| Error::checkpoint(path, format!("stored model configuration: {e}")))?;

    // Values are irrelevant here; the set is about names and shapes and is
    // filled from the file below.
    let (mut params, layout) = PredictorParams::init(&meta.model, 0);

    let count = r.u32("the parameter count")? as usize;
    if count != params.len() {
        return Err(Error::checkpoint(
            path,
            format!("{count} tensors stored, model defines {}", params.len()),
        ));
    }
    let mut filled = vec![false; params.len()];
    for _ in 0..count {
        let name_len = r.u32("a tensor name length")? as usize;
        let name_buf = r.bytes(name_len, "a tensor name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::checkpoint(path, "tensor name is not UTF-8".to_string()))?;
        let id = params
            .find(&name)
            .ok_or_else(|| Error::checkpoint(path, format!("unknown tensor '{name}'")))?;
        if filled[id.index()] {
            return Err(Error::checkpoint(path, format!("tensor '{name}' stored twice")));
        }
        let rank = r.u32(&format!("the rank of '{name}'"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&format!("the dims of '{name}'"))? as usize);
        }
        let tensor = params.get_mut(id);
        if shape != tensor.shape {
            return Err(Error::checkpoint(
                path,
                format!("tensor '{name}' has shape {:?}, model defines {:?}", shape, tensor.shape),
            ));
        }
        let raw = r.bytes(4 * tensor.numel(), &format!("the values of '{name}'"))?;
        for (dst, src) in tensor.data.iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
        }
        filled[id.index()] = true;
    }
    let mut trailer = [0u8; 1];
    if r.inner.read(&mut trailer).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::checkpoint(path, "trailing bytes after the last tensor".to_string()));
    }

    Ok((meta, params, layout))
}
