//! Conditional noise predictors `eps(x_t, t, y)`.
//!
//! Two backbones: an MLP over flattened samples and a small two-level
//! conv net for `[C, H, W]` grids. Both take a sinusoidal timestep embedding
//! and, when `num_labels > 0`, a one-hot label through a separate projection.

mod checkpoint;
mod conv;
mod embed;
mod mlp;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use embed::time_embedding;

use crate::Graph;
use crate::Adam;
use crate::rng::seeded;
use crate::tensor::TensorError;
use crate::Tensor;
use crate::{Real, Var};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unsupported input shape {0:?}")]
    BadShape(Vec<usize>),
    #[error("embedding dimension {0} must be even and positive")]
    BadDim(usize),
    #[error("timestep {t} outside 1..={steps}")]
    Timestep { t: usize, steps: usize },
    #[error("conditional model needs labels")]
    LabelRequired,
    #[error("label {label} outside 0..{num_labels}")]
    BadLabel { label: u32, num_labels: usize },
    #[error("unconditional model got labels")]
    UnexpectedLabels,
    #[error("batch of {batch} with {count} timesteps/labels")]
    BatchMismatch { batch: usize, count: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchSpec {
    /// Fully connected, SiLU activations, one entry per hidden layer width.
    Mlp { hidden: Vec<usize> },
    /// 3x3 convs with two pooling levels at channel widths `[w0, w1]`.
    SmallConv { widths: [usize; 2] },
}

impl ArchSpec {
    pub fn mlp() -> Self {
        ArchSpec::Mlp { hidden: vec![128, 128, 128] }
    }

    pub fn small_conv() -> Self {
        ArchSpec::SmallConv { widths: [16, 32] }
    }

    pub fn tag(&self) -> u8 {
        match self {
            ArchSpec::Mlp { .. } => 1,
            ArchSpec::SmallConv { .. } => 2,
        }
    }

    pub(crate) fn dims(&self) -> Vec<usize> {
        match self {
            ArchSpec::Mlp { hidden } => hidden.clone(),
            ArchSpec::SmallConv { widths } => widths.to_vec(),
        }
    }
}

/// One-hot label vector; all zeros is the null (unconditional) label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbedding {
    pub one_hot: Vec<Real>,
}

impl LabelEmbedding {
    pub fn new(label: u32, num_labels: usize) -> Result<Self> {
        if label as usize >= num_labels {
            return Err(ModelError::BadLabel { label, num_labels });
        }
        let mut one_hot = vec![0.0; num_labels];
        one_hot[label as usize] = 1.0;
        Ok(Self { one_hot })
    }

    pub fn null(num_labels: usize) -> Self {
        Self { one_hot: vec![0.0; num_labels] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// Everything that fixes a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchSpec,
    pub in_shape: Vec<usize>,
    pub num_labels: usize,
    pub time_embed_dim: usize,
    /// Chain length used to normalise timesteps for the embedding.
    pub steps: usize,
    /// Map absent labels to the all-zero embedding instead of failing.
    pub null_label: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    spec: ModelSpec,
    params: Vec<Param>,
}

/// Builds a model with deterministic seeded weights.
pub fn init_model(spec: ModelSpec, seed: u64) -> Result<DenoiserModel> {
    if spec.time_embed_dim == 0 || !spec.time_embed_dim.is_multiple_of(2) {
        return Err(ModelError::BadDim(spec.time_embed_dim));
    }
    if spec.in_shape.is_empty() || spec.in_shape.contains(&0) || spec.steps == 0 {
        return Err(ModelError::BadShape(spec.in_shape.clone()));
    }
    let mut rng = seeded(seed);
    let params = match &spec.arch {
        ArchSpec::Mlp { hidden } => {
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(ModelError::BadShape(hidden.clone()));
            }
            mlp::init(&spec, hidden, &mut rng)
        }
        ArchSpec::SmallConv { widths } => {
            let s = &spec.in_shape;
            if s.len() != 3 || !s[1].is_multiple_of(4) || !s[2].is_multiple_of(4) || widths.contains(&0) {
                return Err(ModelError::BadShape(s.clone()));
            }
            conv::init(&spec, *widths, &mut rng)
        }
    };
    Ok(DenoiserModel { spec, params })
}

impl DenoiserModel {
    pub(crate) fn from_parts(spec: ModelSpec, params: Vec<Param>) -> Self {
        Self { spec, params }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn in_shape(&self) -> &[usize] {
        &self.spec.in_shape
    }

    pub fn num_labels(&self) -> usize {
        self.spec.num_labels
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    fn sample_len(&self) -> usize {
        self.spec.in_shape.iter().product()
    }

    /// Batch size of `x`; a bare sample counts as a batch of one.
    fn batch_of(&self, x: &Tensor) -> Result<usize> {
        if x.shape() == self.spec.in_shape.as_slice() {
            return Ok(1);
        }
        if x.sample_shape() != self.spec.in_shape.as_slice() {
            return Err(TensorError::ShapeMismatch {
                left: x.shape().to_vec(),
                right: self.spec.in_shape.clone(),
            }
            .into());
        }
        Ok(x.batch_len())
    }

    /// `[b, time_embed_dim]` rows for the given timesteps.
    fn time_rows(&self, ts: &[usize]) -> Result<Tensor> {
        let e = self.spec.time_embed_dim;
        let mut data = Vec::with_capacity(ts.len() * e);
        for &t in ts {
            data.extend(time_embedding(t, e, self.spec.steps)?);
        }
        Ok(Tensor::new(vec![ts.len(), e], data)?)
    }

    /// `[b, num_labels]` one-hot rows, or `None` for an unconditional model.
    fn label_rows(&self, batch: usize, labels: Option<&[u32]>) -> Result<Option<Tensor>> {
        let k = self.spec.num_labels;
        if k == 0 {
            return match labels {
                None => Ok(None),
                Some(_) => Err(ModelError::UnexpectedLabels),
            };
        }
        let mut data = Vec::with_capacity(batch * k);
        match labels {
            Some(ls) => {
                if ls.len() != batch {
                    return Err(ModelError::BatchMismatch { batch, count: ls.len() });
                }
                for &l in ls {
                    data.extend(LabelEmbedding::new(l, k)?.one_hot);
                }
            }
            None if self.spec.null_label => data.resize(batch * k, 0.0),
            None => return Err(ModelError::LabelRequired),
        }
        Ok(Some(Tensor::new(vec![batch, k], data)?))
    }

    /// Records the forward pass on `g`. Returns the prediction (same shape as
    /// `x_t`) and the parameter handles in [`DenoiserModel::params`] order.
    pub fn forward(
        &self,
        g: &mut Graph,
        x_t: &Tensor,
        ts: &[usize],
        labels: Option<&[u32]>,
    ) -> Result<(Var, Vec<Var>)> {
        self.record(g, x_t, ts, labels, true)
    }

    fn record(
        &self,
        g: &mut Graph,
        x_t: &Tensor,
        ts: &[usize],
        labels: Option<&[u32]>,
        track: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let batch = self.batch_of(x_t)?;
        if ts.len() != batch {
            return Err(ModelError::BatchMismatch { batch, count: ts.len() });
        }
        let temb = self.time_rows(ts)?;
        let onehot = self.label_rows(batch, labels)?;
        let pvars: Vec<Var> = self
            .params
            .iter()
            .map(|p| if track { g.leaf(&p.tensor) } else { g.leaf_frozen(&p.tensor) })
            .collect();
        let lookup = Lookup { params: &self.params, vars: &pvars };
        let out = match &self.spec.arch {
            ArchSpec::Mlp { hidden } => {
                let flat = x_t.reshape(vec![batch, self.sample_len()])?;
                mlp::forward(g, &lookup, hidden.len(), flat, temb, onehot)?
            }
            ArchSpec::SmallConv { .. } => {
                let mut shape = vec![batch];
                shape.extend(&self.spec.in_shape);
                conv::forward(g, &lookup, x_t.reshape(shape)?, temb, onehot)?
            }
        };
        let out = g.reshape(out, x_t.shape())?;
        Ok((out, pvars))
    }

    /// Noise prediction without gradient tracking.
    pub fn predict(&self, x_t: &Tensor, ts: &[usize], labels: Option<&[u32]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let (out, _) = self.record(&mut g, x_t, ts, labels, false)?;
        Ok(g.value(out).clone())
    }

    /// Prediction with one shared timestep for the whole batch.
    pub fn predict_at(&self, x_t: &Tensor, t: usize, labels: Option<&[u32]>) -> Result<Tensor> {
        let batch = self.batch_of(x_t)?;
        self.predict(x_t, &vec![t; batch], labels)
    }

    /// Populates parameter gradients for the weighted denoising loss and
    /// returns the loss value. Does not step any optimizer.
    pub fn accumulate_grads(
        &mut self,
        x_t: &Tensor,
        ts: &[usize],
        labels: Option<&[u32]>,
        target: &Tensor,
        weights: &[Real],
    ) -> Result<Real> {
        let mut g = Graph::new();
        let (pred, pvars) = self.forward(&mut g, x_t, ts, labels)?;
        let tv = g.constant(target.clone());
        let loss = g.weighted_mse(pred, tv, weights)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(TensorError::NonFinite("denoising loss").into());
        }
        g.backward(loss)?;
        for (p, v) in self.params.iter_mut().zip(&pvars) {
            g.write_grad(*v, &mut p.tensor)?;
        }
        Ok(value)
    }

    /// One optimizer step on `weights_i * ||eps(x_t_i) - target_i||^2`.
    pub fn train_step(
        &mut self,
        opt: &mut Adam,
        x_t: &Tensor,
        ts: &[usize],
        labels: Option<&[u32]>,
        target: &Tensor,
        weights: &[Real],
    ) -> Result<Real> {
        let loss = self.accumulate_grads(x_t, ts, labels, target, weights)?;
        let mut refs: Vec<&mut Tensor> = self.params.iter_mut().map(|p| &mut p.tensor).collect();
        opt.step(&mut refs)?;
        Ok(loss)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.tensor.all_finite())
    }
}

/// Parameter handles by name for one forward pass.
pub(crate) struct Lookup<'a> {
    params: &'a [Param],
    vars: &'a [Var],
}

impl Lookup<'_> {
    pub(crate) fn get(&self, name: &str) -> Var {
        let i = self.params.iter().position(|p| p.name == name).expect("known parameter");
        self.vars[i]
    }

    pub(crate) fn has(&self, name: &str) -> bool {
        self.params.iter().any(|p| p.name == name)
    }
}

pub(crate) fn param<R: rand::Rng>(
    name: &str,
    shape: Vec<usize>,
    std: Real,
    rng: &mut R,
) -> Param {
    let n = shape.iter().product();
    let data = if std == 0.0 {
        vec![0.0; n]
    } else {
        crate::rng::normal_vec(rng, n).into_iter().map(|v| v * std).collect()
    };
    Param { name: name.to_string(), tensor: Tensor::new(shape, data).unwrap().with_grad() }
}
