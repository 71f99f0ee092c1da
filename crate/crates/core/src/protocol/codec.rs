use super::{
    InferenceRequest, InferenceResponse, Message, ProtocolError, Result, TrainBatchUpload,
    WireTensor,
};
use crate::bytes::{Reader, Truncated, Writer};
use crate::tensor::Tensor;

pub const MESSAGE_MAGIC: &[u8; 4] = b"CFMS";
/// Magic, tag and payload length.
pub const HEADER_LEN: usize = 9;
/// CRC-32 of tag, length and payload.
pub const TRAILER_LEN: usize = 4;

const DTYPE_F32: u8 = 4;
const DTYPE_F64: u8 = 8;
const MAX_NDIM: usize = 8;

impl From<Truncated> for ProtocolError {
    fn from(_: Truncated) -> Self {
        ProtocolError::Truncated
    }
}

/// Serializes a message. Identical messages produce identical bytes.
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    msg.validate()?;
    let mut p = Writer::new();
    match msg {
        Message::TrainBatchUpload(u) => {
            put_tensor(&mut p, &u.x_ts);
            put_tensor(&mut p, &u.eps_s);
            put_ids(&mut p, &u.t_s);
            put_labels(&mut p, &u.labels);
            p.u32(u.client_id);
            p.u32(u.round);
        }
        Message::InferenceRequest(r) => {
            put_labels(&mut p, &r.labels);
            p.u32(r.count);
            match r.seed {
                Some(s) => {
                    p.u8(1);
                    p.u64(s);
                }
                None => p.u8(0),
            }
            p.u32(r.client_id);
        }
        Message::InferenceResponse(r) => {
            put_tensor(&mut p, &r.x_tz);
            p.u32(r.t_zeta);
            p.u64(r.seed_used);
        }
    }
    let payload = p.buf;
    let len = u32::try_from(payload.len())
        .map_err(|_| ProtocolError::InvariantViolation("payload exceeds u32".into()))?;
    let mut out = Writer::new();
    out.bytes(MESSAGE_MAGIC);
    out.u8(msg.tag());
    out.u32(len);
    out.bytes(&payload);
    let crc = crc32fast::hash(&out.buf[4..]);
    out.u32(crc);
    Ok(out.buf)
}

/// Parses exactly one encoded message; trailing bytes are rejected.
pub fn decode(bytes: &[u8]) -> Result<Message> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MESSAGE_MAGIC {
        return Err(ProtocolError::BadMagic);
    }
    let tag = r.u8()?;
    if !(1..=3).contains(&tag) {
        return Err(ProtocolError::BadTag(tag));
    }
    let len = r.u32()? as usize;
    let payload = r.take(len)?;
    let crc = r.u32()?;
    if r.remaining() != 0 {
        return Err(ProtocolError::InvariantViolation(format!(
            "{} trailing bytes",
            r.remaining()
        )));
    }
    if crc32fast::hash(&bytes[4..HEADER_LEN + len]) != crc {
        return Err(ProtocolError::Checksum);
    }
    let mut p = Reader::new(payload);
    let msg = match tag {
        1 => Message::TrainBatchUpload(TrainBatchUpload {
            x_ts: get_tensor(&mut p)?,
            eps_s: get_tensor(&mut p)?,
            t_s: get_ids(&mut p)?,
            labels: get_labels(&mut p)?,
            client_id: p.u32()?,
            round: p.u32()?,
        }),
        2 => Message::InferenceRequest(InferenceRequest {
            labels: get_labels(&mut p)?,
            count: p.u32()?,
            seed: match p.u8()? {
                0 => None,
                1 => Some(p.u64()?),
                f => return Err(ProtocolError::InvariantViolation(format!("seed flag {f}"))),
            },
            client_id: p.u32()?,
        }),
        _ => Message::InferenceResponse(InferenceResponse {
            x_tz: get_tensor(&mut p)?,
            t_zeta: p.u32()?,
            seed_used: p.u64()?,
        }),
    };
    if p.remaining() != 0 {
        return Err(ProtocolError::InvariantViolation("payload longer than its fields".into()));
    }
    msg.validate()?;
    Ok(msg)
}

fn put_tensor(w: &mut Writer, t: &WireTensor) {
    let shape = t.shape();
    w.u8(match t {
        WireTensor::F32(_) => DTYPE_F32,
        WireTensor::F64(_) => DTYPE_F64,
    });
    w.u8(shape.len() as u8);
    for &d in shape {
        w.u32(d as u32);
    }
    match t {
        WireTensor::F32(t) => t.data().iter().for_each(|&v| w.f32(v)),
        WireTensor::F64(t) => t.data().iter().for_each(|&v| w.f64(v)),
    }
}

fn get_tensor(r: &mut Reader) -> Result<WireTensor> {
    let dtype = r.u8()?;
    let width = match dtype {
        DTYPE_F32 => 4,
        DTYPE_F64 => 8,
        d => return Err(ProtocolError::InvariantViolation(format!("unknown dtype {d}"))),
    };
    let ndim = r.u8()? as usize;
    if ndim > MAX_NDIM {
        return Err(ProtocolError::InvariantViolation(format!("{ndim} dimensions")));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut n: usize = 1;
    for _ in 0..ndim {
        let d = r.u32()? as usize;
        n = n.checked_mul(d).ok_or(ProtocolError::Truncated)?;
        shape.push(d);
    }
    let raw = r.take(n.checked_mul(width).ok_or(ProtocolError::Truncated)?)?;
    let bad = |e: crate::tensor::TensorError| ProtocolError::InvariantViolation(e.to_string());
    Ok(match dtype {
        DTYPE_F32 => {
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
            WireTensor::F32(Tensor::new(shape, data.collect()).map_err(bad)?)
        }
        _ => {
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
            WireTensor::F64(Tensor::new(shape, data.collect()).map_err(bad)?)
        }
    })
}

fn put_ids(w: &mut Writer, ids: &[u32]) {
    w.u32(ids.len() as u32);
    ids.iter().for_each(|&v| w.u32(v));
}

fn get_ids(r: &mut Reader) -> Result<Vec<u32>> {
    let n = r.u32()? as usize;
    if n.saturating_mul(4) > r.remaining() {
        return Err(ProtocolError::Truncated);
    }
    (0..n).map(|_| Ok(r.u32()?)).collect()
}

fn put_labels(w: &mut Writer, labels: &Option<Vec<u32>>) {
    match labels {
        Some(l) => {
            w.u8(1);
            put_ids(w, l);
        }
        None => w.u8(0),
    }
}

fn get_labels(r: &mut Reader) -> Result<Option<Vec<u32>>> {
    match r.u8()? {
        0 => Ok(None),
        1 => Ok(Some(get_ids(r)?)),
        f => Err(ProtocolError::InvariantViolation(format!("label flag {f}"))),
    }
}
