//! Fidelity and disclosure measurements.
//!
//! Distances are Fréchet distances between Gaussian fits of a fixed feature
//! embedding, not of a pretrained network's activations.

mod inversion;
pub mod linalg;
mod probe;

pub use inversion::{inversion_attack, InversionResult};
pub use probe::{attribute_probe, macro_f1, ProbeConfig, ProbeResult};

use crate::rng::{normal_vec, seeded};
use crate::{Real, Scalar, Tensor};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("matrix not positive semidefinite: eigenvalue {0}")]
    NonPsd(f64),
    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Width of the random-projection part of the embedding.
pub const PROJECTION_DIM: usize = 32;
const PROJECTION_SEED: u64 = 0xFEA7_0E5B;

/// Flattened samples followed by a fixed random projection of them.
/// Output shape is `[n, flat + 32]`.
pub fn feature_embed(x: &Tensor) -> Result<Tensor> {
    let n = x.batch_len();
    if n == 0 || x.numel() == 0 {
        return Err(MetricsError::EmptyBatch);
    }
    let flat = x.numel() / n;
    let proj = projection(flat);
    let d = flat + PROJECTION_DIM;
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = x.sample(i);
        out.extend_from_slice(row);
        for k in 0..PROJECTION_DIM {
            out.push(row.iter().zip(&proj[k * flat..(k + 1) * flat]).map(|(a, b)| a * b).sum());
        }
    }
    Ok(Tensor::new(vec![n, d], out).expect("length matches"))
}

/// `32 x flat` Gaussian matrix scaled by `1/sqrt(flat)`.
fn projection(flat: usize) -> Vec<Real> {
    let mut rng = seeded(PROJECTION_SEED ^ flat as u64);
    let scale = 1.0 / (flat as Real).sqrt();
    normal_vec(&mut rng, PROJECTION_DIM * flat).into_iter().map(|v| v * scale).collect()
}

/// Mean and unbiased covariance of a set of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats<S> {
    pub mean: Vec<S>,
    /// Row-major `d x d`.
    pub cov: Vec<S>,
    pub n: usize,
}

impl<S: Scalar> FeatureStats<S> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_moments(mean: Vec<S>, cov: Vec<S>, n: usize) -> Result<Self> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(MetricsError::DimMismatch(d * d, cov.len()));
        }
        Ok(Self { mean, cov, n })
    }

    /// `rows` holds `n` row-major vectors of length `d`.
    pub fn from_rows(rows: &[S], d: usize) -> Result<Self> {
        if d == 0 || rows.is_empty() {
            return Err(MetricsError::EmptyBatch);
        }
        if !rows.len().is_multiple_of(d) {
            return Err(MetricsError::DimMismatch(d, rows.len() % d));
        }
        let n = rows.len() / d;
        if n < 2 {
            return Err(MetricsError::TooFewSamples { need: 2, got: n });
        }
        let nf = S::from_usize(n).unwrap();
        let mut mean = vec![S::zero(); d];
        for r in rows.chunks_exact(d) {
            mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut cov = vec![S::zero(); d * d];
        let mut c = vec![S::zero(); d];
        for r in rows.chunks_exact(d) {
            c.iter_mut().zip(r.iter().zip(&mean)).for_each(|(c, (&v, &m))| *c = v - m);
            for i in 0..d {
                let ci = c[i];
                for j in i..d {
                    cov[i * d + j] += ci * c[j];
                }
            }
        }
        let denom = nf - S::one();
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / denom;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, n })
    }
}

impl FeatureStats<Real> {
    /// Statistics of [`feature_embed`] of a batch.
    pub fn of_batch(x: &Tensor) -> Result<Self> {
        let e = feature_embed(x)?;
        Self::from_rows(e.data(), e.shape()[1])
    }
}

/// Absolute eigenvalue tolerance, relative to the largest eigenvalue when that exceeds one.
pub const PSD_TOLERANCE: f64 = 1e-9;

/// `|mu_a - mu_b|^2 + tr(C_a + C_b - 2 (C_a C_b)^{1/2})`, clamped at zero.
pub fn frechet_distance<S: Scalar>(a: &FeatureStats<S>, b: &FeatureStats<S>) -> Result<S> {
    let d = a.dim();
    if b.dim() != d {
        return Err(MetricsError::DimMismatch(d, b.dim()));
    }
    let mean_term: S = a.mean.iter().zip(&b.mean).map(|(&x, &y)| (x - y) * (x - y)).sum();
    let trace = |m: &[S]| (0..d).map(|i| m[i * d + i]).sum::<S>();
    let tol = |vals: &[S]| {
        let top = vals.iter().fold(S::one(), |acc, v| acc.max(v.abs()));
        S::lit(PSD_TOLERANCE) * top
    };
    let non_psd = |w: S| MetricsError::NonPsd(w.to_f64().unwrap_or(f64::NAN));
    // tr (C_a C_b)^{1/2} = tr (S C_b S)^{1/2} with S = C_a^{1/2}
    let (va, ea) = linalg::sym_eigen(&a.cov, d);
    let va = linalg::clamp_psd(&va, tol(&va)).map_err(non_psd)?;
    let sa = linalg::spectral_map(&va, &ea, d, |l| l.sqrt());
    let mut m = linalg::matmul(&linalg::matmul(&sa, &b.cov, d), &sa, d);
    for i in 0..d {
        for j in i + 1..d {
            let s = (m[i * d + j] + m[j * d + i]) * S::lit(0.5);
            m[i * d + j] = s;
            m[j * d + i] = s;
        }
    }
    let vm = linalg::sym_eigenvalues(&m, d);
    let vm = linalg::clamp_psd(&vm, tol(&vm)).map_err(non_psd)?;
    let cross: S = vm.iter().map(|l| l.sqrt()).sum();
    let fd = mean_term + trace(&a.cov) + trace(&b.cov) - S::lit(2.0) * cross;
    Ok(fd.max(S::zero()))
}

/// Embeds both batches and returns their Fréchet distance.
pub fn batch_frechet(a: &Tensor, b: &Tensor) -> Result<Real> {
    frechet_distance(&FeatureStats::of_batch(a)?, &FeatureStats::of_batch(b)?)
}
