//! Binary checkpoint format.
//!
//! ```text
//! "GRNL"  u32 version  u32 tensor_count
//! per tensor: u32 name_len, name (UTF-8), u32 rank, u64 dims[rank], f64 values[]
//! u64 trailer_len, trailer (JSON: model config, schedule, scaler, metrics,
//!                           hemisphere, training subjects)
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::braingraph::{FeatureScaler, Hemisphere, MetricPair};
use crate::denoiser::{init_params, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;
use crate::trainer::TrainedModel;

pub const MAGIC: &[u8; 4] = b"GRNL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Trailer {
    model: ModelConfig,
    schedule: ScheduleConfig,
    scaler: FeatureScaler,
    metrics: MetricPair,
    hemisphere: Hemisphere,
    train_subjects: Vec<String>,
}

pub fn encode_checkpoint(model: &TrainedModel) -> Result<Vec<u8>> {
    let tensors = model.params.all_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let trailer = Trailer {
        model: model.model,
        schedule: model.schedule,
        scaler: model.scaler.clone(),
        metrics: model.metrics.clone(),
        hemisphere: model.hemisphere,
        train_subjects: model.train_subjects.clone(),
    };
    let json = serde_json::to_vec(&trailer).map_err(|e| Error::CheckpointMeta(e.to_string()))?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    Ok(out)
}

pub fn save_checkpoint(model: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated(what))?;
        if end > self.buf.len() {
            return Err(Error::Truncated(what));
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }
}

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Parses a checkpoint. With `expected`, tensor shapes are validated against
/// that configuration instead of the one stored in the trailer.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<TrainedModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| Error::BadMagic)? != MAGIC {
        return Err(Error::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")? as usize;
    let mut raw = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::CheckpointMeta("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64("tensor dims")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::Truncated("tensor values"))?;
        let bytes = r.take(
            n.checked_mul(8).ok_or(Error::Truncated("tensor values"))?,
            "tensor values",
        )?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        raw.push(RawTensor {
            name,
            shape,
            values,
        });
    }
    let trailer_len = r.u64("trailer length")? as usize;
    let json = r.take(trailer_len, "trailer")?;
    let trailer: Trailer =
        serde_json::from_slice(json).map_err(|e| Error::CheckpointMeta(e.to_string()))?;

    let config = expected.copied().unwrap_or(trailer.model);
    let mut params: ModelParams = init_params(&config, 0)?;
    for (name, t) in params.all_tensors_mut() {
        let src = raw
            .iter()
            .find(|rt| rt.name == name)
            .ok_or_else(|| Error::CheckpointMissingTensor(name.clone()))?;
        if src.shape != t.shape() {
            return Err(Error::CheckpointShape {
                name,
                found: src.shape.clone(),
                expected: t.shape().to_vec(),
            });
        }
        t.values_mut().copy_from_slice(&src.values);
    }
    Ok(TrainedModel {
        model: config,
        params,
        schedule: trailer.schedule,
        scaler: trailer.scaler,
        metrics: trailer.metrics,
        hemisphere: trailer.hemisphere,
        train_subjects: trailer.train_subjects,
    })
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<&ModelConfig>,
) -> Result<TrainedModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, expected)
}
