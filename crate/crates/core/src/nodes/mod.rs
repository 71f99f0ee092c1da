//! Client and server nodes, collaborative training and inference.
//!
//! A [`Session`] wires one server to `k` clients over per-client transports.
//! Training rounds visit clients in ascending id order; the server applies
//! uploads in the order it receives them, which is the same order.

mod client;
mod sampler;
mod server;
mod session;

pub use client::{ClientNode, ClientStep};
pub use sampler::{denoise_range, sample_monolithic};
pub use server::{Served, ServerNode};
pub use session::{
    deliver_intermediate, infer_collaborative, infer_collaborative_shared, infer_shared_intermediate,
    train_collaborative, Session, TrainRound,
};

use crate::denoiser::ModelError;
use crate::diffusion::{DiffusionError, RenoiseMode};
use crate::protocol::{ProtocolError, WirePrecision};
use crate::tensor::TensorError;
use crate::Real;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("cut point {t_zeta} of {steps} has no split; use the baseline path")]
    DegenerateCut { t_zeta: usize, steps: usize },
    #[error("server received timestep {t_s} at or below the cut point {t_zeta}")]
    TimestepLeak { t_s: usize, t_zeta: usize },
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("unexpected {0} message")]
    UnexpectedMessage(&'static str),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

impl From<TensorError> for NodeError {
    fn from(e: TensorError) -> Self {
        NodeError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, NodeError>;

/// Per-timestep loss weights `omega_t`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "weights")]
pub enum Guidance {
    #[default]
    Uniform,
    /// `weights[t - 1]` is `omega_t`; must have length `T`.
    Table(Vec<Real>),
}

impl Guidance {
    pub fn weight(&self, t: usize) -> Real {
        match self {
            Guidance::Uniform => 1.0,
            Guidance::Table(w) => w[t - 1],
        }
    }

    pub fn weights(&self, ts: &[usize]) -> Vec<Real> {
        ts.iter().map(|&t| self.weight(t)).collect()
    }

    fn check(&self, steps: usize) -> Result<()> {
        match self {
            Guidance::Table(w) if w.len() != steps || w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) => {
                Err(NodeError::ConfigMismatch(format!(
                    "guidance table needs {steps} finite non-negative weights, got {}",
                    w.len()
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Trailing-window plateau test on the loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    pub min_rel_improvement: Real,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { window: 200, min_rel_improvement: 1e-3 }
    }
}

impl EarlyStop {
    /// True once the last `window` losses improve on the `window` before
    /// them by less than the threshold.
    pub fn plateaued(&self, trace: &[Real]) -> bool {
        let w = self.window;
        if w == 0 || trace.len() < 2 * w {
            return false;
        }
        let n = trace.len();
        let prev: Real = trace[n - 2 * w..n - w].iter().sum::<Real>() / w as Real;
        let last: Real = trace[n - w..].iter().sum::<Real>() / w as Real;
        prev - last < self.min_rel_improvement * prev.abs()
    }
}

/// Settings every node of a session must agree on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub steps: usize,
    pub t_zeta: usize,
    pub renoise: RenoiseMode,
    /// Client uses chain timesteps unchanged instead of the stretched table.
    pub no_remap: bool,
    pub learning_rate: Real,
    pub batch_size: usize,
    /// Batches each client processes per round.
    pub batches_per_round: usize,
    pub guidance: Guidance,
    pub wire: WirePrecision,
    pub early_stop: Option<EarlyStop>,
    /// Run client local steps on worker threads; results are unchanged.
    pub parallel_clients: bool,
    /// Clamp the implied clean sample to `[-c, c]` while sampling.
    pub clip_x0: Option<Real>,
}

impl SessionConfig {
    pub fn new(steps: usize, t_zeta: usize) -> Self {
        Self {
            steps,
            t_zeta,
            renoise: RenoiseMode::Marginal,
            no_remap: false,
            learning_rate: 1e-3,
            batch_size: 8,
            batches_per_round: 1,
            guidance: Guidance::Uniform,
            wire: WirePrecision::F32,
            early_stop: None,
            parallel_clients: false,
            clip_x0: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.t_zeta > self.steps {
            return Err(NodeError::ConfigMismatch(format!(
                "cut {} outside 0..={}",
                self.t_zeta, self.steps
            )));
        }
        if matches!(self.clip_x0, Some(c) if !(c > 0.0)) {
            return Err(NodeError::ConfigMismatch("clip bound must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(NodeError::EmptyBatch);
        }
        self.guidance.check(self.steps)
    }
}

/// Work counters. Denoise steps count batched reverse steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub train_steps: u64,
    pub denoise_steps: u64,
    pub samples_generated: u64,
}
