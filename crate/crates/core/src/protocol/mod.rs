//! Messages exchanged between client and server nodes.
//!
//! Only three message kinds exist and none of them can carry model
//! parameters or clean data: clients upload re-noised samples above the cut
//! and request inference; the server answers with samples at the cut.

mod codec;
mod transport;

pub use codec::{decode, encode, HEADER_LEN, MESSAGE_MAGIC, TRAILER_LEN};
pub use transport::{
    sim_pair, AuditHook, ChannelStats, Direction, SimConfig, SimEndpoint, StatsHandle,
    StreamTransport, Transport,
};

use crate::tensor::Tensor as GenericTensor;
use crate::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("bad magic")]
    BadMagic,
    #[error("unknown message tag {0}")]
    BadTag(u8),
    #[error("truncated message")]
    Truncated,
    #[error("checksum mismatch")]
    Checksum,
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("channel closed")]
    ChannelClosed,
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// Element type used for tensors on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WirePrecision {
    #[default]
    F32,
    F64,
}

/// Tensor as transmitted; `F32` is a lossy downcast of the compute type.
#[derive(Debug, Clone, PartialEq)]
pub enum WireTensor {
    F32(GenericTensor<f32>),
    F64(GenericTensor<f64>),
}

impl WireTensor {
    pub fn from_compute(t: &Tensor, precision: WirePrecision) -> Self {
        match precision {
            WirePrecision::F32 => WireTensor::F32(t.cast()),
            WirePrecision::F64 => WireTensor::F64(t.clone()),
        }
    }

    pub fn to_compute(&self) -> Tensor {
        match self {
            WireTensor::F32(t) => t.cast(),
            WireTensor::F64(t) => t.clone(),
        }
    }

    pub fn precision(&self) -> WirePrecision {
        match self {
            WireTensor::F32(_) => WirePrecision::F32,
            WireTensor::F64(_) => WirePrecision::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            WireTensor::F32(t) => t.shape(),
            WireTensor::F64(t) => t.shape(),
        }
    }

    pub fn batch_len(&self) -> usize {
        self.shape().first().copied().unwrap_or(1)
    }

    fn all_finite(&self) -> bool {
        match self {
            WireTensor::F32(t) => t.all_finite(),
            WireTensor::F64(t) => t.all_finite(),
        }
    }
}

/// Re-noised client batch for one server training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatchUpload {
    pub x_ts: WireTensor,
    pub eps_s: WireTensor,
    pub t_s: Vec<u32>,
    pub labels: Option<Vec<u32>>,
    pub client_id: u32,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub labels: Option<Vec<u32>>,
    pub count: u32,
    pub seed: Option<u64>,
    pub client_id: u32,
}

/// Server samples at noise level `t_zeta`.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResponse {
    pub x_tz: WireTensor,
    pub t_zeta: u32,
    pub seed_used: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    TrainBatchUpload(TrainBatchUpload),
    InferenceRequest(InferenceRequest),
    InferenceResponse(InferenceResponse),
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::TrainBatchUpload(_) => 1,
            Message::InferenceRequest(_) => 2,
            Message::InferenceResponse(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::TrainBatchUpload(_) => "train_batch_upload",
            Message::InferenceRequest(_) => "inference_request",
            Message::InferenceResponse(_) => "inference_response",
        }
    }

    /// Checks the per-message invariants that hold independent of session
    /// configuration.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProtocolError::InvariantViolation(m));
        match self {
            Message::TrainBatchUpload(u) => {
                let b = u.t_s.len();
                if b == 0 {
                    return bad("empty upload".into());
                }
                if u.x_ts.shape() != u.eps_s.shape() || u.x_ts.batch_len() != b {
                    return bad(format!(
                        "batch dimensions disagree: x {:?}, eps {:?}, t {}",
                        u.x_ts.shape(),
                        u.eps_s.shape(),
                        b
                    ));
                }
                if let Some(l) = &u.labels {
                    if l.len() != b {
                        return bad(format!("{} labels for batch of {b}", l.len()));
                    }
                }
                if u.t_s.contains(&0) {
                    return bad("server timestep 0".into());
                }
                if !u.x_ts.all_finite() || !u.eps_s.all_finite() {
                    return bad("non-finite tensor".into());
                }
            }
            Message::InferenceRequest(r) => {
                if r.count == 0 {
                    return bad("count must be positive".into());
                }
                if let Some(l) = &r.labels {
                    if l.len() != r.count as usize {
                        return bad(format!("{} labels for count {}", l.len(), r.count));
                    }
                }
            }
            Message::InferenceResponse(r) => {
                if !r.x_tz.all_finite() {
                    return bad("non-finite tensor".into());
                }
            }
        }
        Ok(())
    }
}
