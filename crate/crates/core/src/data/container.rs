//! `CFDS` dataset container.
//!
//! ```text
//! "CFDS" | version u32 | kind u8 | x shape: u8 n, u32 * n | n_attrs u8
//! | cardinality: u32 * n_attrs | x: f64 * numel | attrs: u32 * (len * n_attrs)
//! ```

use super::{DataError, Dataset, DatasetKind, Result};
use crate::bytes::{Reader, Truncated, Writer};
use crate::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"CFDS";
pub const DATASET_VERSION: u32 = 1;

impl From<Truncated> for DataError {
    fn from(_: Truncated) -> Self {
        DataError::Container("truncated".into())
    }
}

pub fn dump_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u8(match ds.kind {
        DatasetKind::Gauss2d => 1,
        DatasetKind::Sprites => 2,
    });
    w.u8(ds.x.shape().len() as u8);
    ds.x.shape().iter().for_each(|&d| w.u32(d as u32));
    w.u8(ds.cardinality.len() as u8);
    ds.cardinality.iter().for_each(|&c| w.u32(c));
    ds.x.data().iter().for_each(|&v| w.f64(v));
    ds.attrs.iter().flatten().for_each(|&a| w.u32(a));
    w.buf
}

pub fn load_dataset(bytes: &[u8]) -> Result<Dataset> {
    let bad = |m: String| DataError::Container(m);
    let mut r = Reader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind = match r.u8()? {
        1 => DatasetKind::Gauss2d,
        2 => DatasetKind::Sprites,
        k => return Err(bad(format!("unknown kind {k}"))),
    };
    let nd = r.u8()? as usize;
    let mut shape = Vec::with_capacity(nd);
    for _ in 0..nd {
        shape.push(r.u32()? as usize);
    }
    let na = r.u8()? as usize;
    let mut cardinality = Vec::with_capacity(na);
    for _ in 0..na {
        cardinality.push(r.u32()?);
    }
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Truncated)?;
    if numel.saturating_mul(8) > r.remaining() {
        return Err(Truncated.into());
    }
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(r.f64()?);
    }
    let x = Tensor::new(shape, data).map_err(|e| bad(e.to_string()))?;
    let n = x.batch_len();
    let mut attrs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(na);
        for _ in 0..na {
            row.push(r.u32()?);
        }
        attrs.push(row);
    }
    if r.remaining() != 0 {
        return Err(bad(format!("{} trailing bytes", r.remaining())));
    }
    Dataset::new(kind, x, attrs, cardinality)
}
