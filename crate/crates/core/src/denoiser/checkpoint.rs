//! `CFCK` checkpoint container.
//!
//! ```text
//! "CFCK" | version u32 | arch u8 | dims: u32 n, u32 * n | in_shape: u8 n, u32 * n
//! | num_labels u32 | time_embed_dim u32 | steps u32 | null_label u8 | config_hash u64
//! | n_params u32 | n_params * (name: u16 len, utf8 | shape: u8 n, u32 * n | f64 * numel)
//! ```
//! All integers and reals little-endian.

use super::{init_model, ArchSpec, DenoiserModel, ModelError, ModelSpec, Param, Result};
use crate::bytes::{Reader, Truncated, Writer};
use crate::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

impl From<Truncated> for ModelError {
    fn from(_: Truncated) -> Self {
        ModelError::Checkpoint("truncated".into())
    }
}

pub fn save_checkpoint(model: &DenoiserModel, config_hash: u64) -> Vec<u8> {
    let spec = model.spec();
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(spec.arch.tag());
    let dims = spec.arch.dims();
    w.u32(dims.len() as u32);
    dims.iter().for_each(|&d| w.u32(d as u32));
    w.u8(spec.in_shape.len() as u8);
    spec.in_shape.iter().for_each(|&d| w.u32(d as u32));
    w.u32(spec.num_labels as u32);
    w.u32(spec.time_embed_dim as u32);
    w.u32(spec.steps as u32);
    w.u8(spec.null_label as u8);
    w.u64(config_hash);
    w.u32(model.params().len() as u32);
    for p in model.params() {
        w.u16(p.name.len() as u16);
        w.bytes(p.name.as_bytes());
        w.u8(p.tensor.shape().len() as u8);
        p.tensor.shape().iter().for_each(|&d| w.u32(d as u32));
        p.tensor.data().iter().for_each(|&v| w.f64(v));
    }
    w.buf
}

/// Parses a checkpoint; returns the model and the embedded config hash.
pub fn load_checkpoint(bytes: &[u8]) -> Result<(DenoiserModel, u64)> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
    }
    let tag = r.u8()?;
    let n = r.u32()? as usize;
    let dims = (0..n).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let arch = match (tag, dims.as_slice()) {
        (1, _) => ArchSpec::Mlp { hidden: dims },
        (2, &[a, b]) => ArchSpec::SmallConv { widths: [a, b] },
        _ => return Err(bad("unknown architecture")),
    };
    let nd = r.u8()? as usize;
    let in_shape =
        (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
    let num_labels = r.u32()? as usize;
    let time_embed_dim = r.u32()? as usize;
    let steps = r.u32()? as usize;
    let null_label = match r.u8()? {
        0 => false,
        1 => true,
        _ => return Err(bad("bad flag")),
    };
    let config_hash = r.u64()?;
    let spec = ModelSpec { arch, in_shape, num_labels, time_embed_dim, steps, null_label };
    let template = init_model(spec.clone(), 0)?;
    let count = r.u32()? as usize;
    if count != template.params().len() {
        return Err(bad("parameter count does not match architecture"));
    }
    let mut params = Vec::with_capacity(count);
    for expected in template.params() {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| bad("name not utf-8"))?;
        let nd = r.u8()? as usize;
        let shape =
            (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        if name != expected.name || shape != expected.tensor.shape() {
            return Err(ModelError::Checkpoint(format!("unexpected parameter {name} {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| r.f64()).collect::<std::result::Result<Vec<_>, _>>()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        params.push(Param { name: name.to_string(), tensor: Tensor::new(shape, data)?.with_grad() });
    }
    if r.remaining() != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok((DenoiserModel::from_parts(spec, params), config_hash))
}
