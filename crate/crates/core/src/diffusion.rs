//! Noise schedules, the closed-form forward process, ancestral reverse steps
//! and the cut-point timestep remap.
//!
//! Timesteps are 1-based everywhere in the public API (`t = 1..=T`);
//! `alpha_bar(0)` is defined as 1 so that a cut at zero means clean data.

use crate::tensor::{Tensor, TensorError};
use crate::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid schedule parameters: T={steps}, beta in [{beta_start}, {beta_end}]")]
    BadRange { steps: usize, beta_start: f64, beta_end: f64 },
    #[error("timestep {t} outside 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("server timestep {t_s} must exceed cut point {t_zeta}")]
    TimestepOrder { t_zeta: usize, t_s: usize },
    #[error("cut point {t_zeta} outside 0..={steps}")]
    CutOutOfRange { t_zeta: usize, steps: usize },
    #[error("reverse step at t={0} needs a noise sample")]
    MissingNoise(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Linear beta schedule with derived `alpha` and cumulative `alpha_bar`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule<S> {
    steps: usize,
    beta: Vec<S>,
    alpha: Vec<S>,
    alpha_bar: Vec<S>,
}

impl<S: Scalar> Schedule<S> {
    /// Linearly interpolates beta from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(steps: usize, beta_start: S, beta_end: S) -> Result<Self> {
        let bad = || DiffusionError::BadRange {
            steps,
            beta_start: beta_start.to_f64().unwrap_or(f64::NAN),
            beta_end: beta_end.to_f64().unwrap_or(f64::NAN),
        };
        if steps == 0
            || !(beta_start > S::zero())
            || !(beta_start <= beta_end)
            || !(beta_end < S::one())
        {
            return Err(bad());
        }
        let beta: Vec<S> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    let frac = S::from_usize(i).unwrap() / S::from_usize(steps - 1).unwrap();
                    beta_start + (beta_end - beta_start) * frac
                }
            })
            .collect();
        let alpha: Vec<S> = beta.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = S::one();
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { steps, beta, alpha, alpha_bar })
    }

    /// Linear schedule whose endpoints are rescaled from the 1000-step
    /// reference range `[1e-4, 0.02]`, so shorter chains still end near pure
    /// noise.
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let (start, end) = default_beta_range(steps);
        Self::linear(steps, S::lit(start), S::lit(end))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(DiffusionError::TimestepOutOfRange { t, steps: self.steps });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<S> {
        Ok(self.beta[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<S> {
        Ok(self.alpha[self.check(t)?])
    }

    /// Cumulative product up to `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<S> {
        if t == 0 {
            return Ok(S::one());
        }
        Ok(self.alpha_bar[self.check(t)?])
    }

    pub fn betas(&self) -> &[S] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bar
    }
}

/// Beta endpoints used when a config does not set them explicitly.
pub fn default_beta_range(steps: usize) -> (f64, f64) {
    let scale = 1000.0 / steps.max(1) as f64;
    let start = 1e-4 * scale;
    let end = (0.02 * scale).min(0.999);
    (start.min(end), end)
}

/// Number of denoising steps handed to the clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CutPoint {
    t_zeta: usize,
    steps: usize,
}

impl CutPoint {
    pub fn new(t_zeta: usize, steps: usize) -> Result<Self> {
        if t_zeta > steps {
            return Err(DiffusionError::CutOutOfRange { t_zeta, steps });
        }
        Ok(Self { t_zeta, steps })
    }

    pub fn t_zeta(self) -> usize {
        self.t_zeta
    }

    pub fn steps(self) -> usize {
        self.steps
    }

    /// Global model: the server runs every step.
    pub fn is_global(self) -> bool {
        self.t_zeta == 0
    }

    /// Independent client models: no server involvement.
    pub fn is_independent(self) -> bool {
        self.t_zeta == self.steps
    }
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
pub fn diffuse_with_alpha_bar<S: Scalar>(
    x0: &Tensor<S>,
    alpha_bar: S,
    eps: &Tensor<S>,
) -> Result<Tensor<S>> {
    Ok(x0.axpby(alpha_bar.sqrt(), eps, (S::one() - alpha_bar).sqrt())?)
}

/// Samples `q(x_t | x_0)` in closed form given the noise draw `eps`.
pub fn forward_diffuse<S: Scalar>(
    x0: &Tensor<S>,
    t: usize,
    eps: &Tensor<S>,
    s: &Schedule<S>,
) -> Result<Tensor<S>> {
    let ab = s.alpha_bar(s.check(t)? + 1)?;
    diffuse_with_alpha_bar(x0, ab, eps)
}

/// Per-sample variant of [`forward_diffuse`]: row `i` of the batch is taken
/// to noise level `ts[i]`.
pub fn forward_diffuse_batch<S: Scalar>(
    x0: &Tensor<S>,
    ts: &[usize],
    eps: &Tensor<S>,
    s: &Schedule<S>,
) -> Result<Tensor<S>> {
    x0.check_same(eps)?;
    let per = x0.sample_shape().iter().product::<usize>();
    check_batch(x0, ts.len())?;
    let mut out = x0.clone();
    for (i, &t) in ts.iter().enumerate() {
        let ab = s.alpha_bar(s.check(t)? + 1)?;
        let (a, b) = (ab.sqrt(), (S::one() - ab).sqrt());
        let (xs, es) = (&x0.data()[i * per..(i + 1) * per], &eps.data()[i * per..(i + 1) * per]);
        for (j, o) in out.data_mut()[i * per..(i + 1) * per].iter_mut().enumerate() {
            *o = a * xs[j] + b * es[j];
        }
    }
    Ok(out)
}

fn check_batch<S: Scalar>(x: &Tensor<S>, n: usize) -> Result<()> {
    if x.batch_len() != n {
        return Err(TensorError::ShapeMismatch { left: x.shape().to_vec(), right: vec![n] }.into());
    }
    Ok(())
}

/// How a client re-noises `x_{t_zeta}` up to a server timestep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenoiseMode {
    /// Conditional coefficients `sqrt(ab_s / ab_zeta)`; preserves the
    /// forward-process marginal at `t_s`.
    #[default]
    Marginal,
    /// Unconditional coefficients `sqrt(ab_s)`, `sqrt(1 - ab_s)` applied
    /// directly to `x_{t_zeta}`. Does not preserve the marginal.
    Literal,
}

/// Takes a sample at noise level `t_zeta` to level `t_s > t_zeta`.
pub fn conditional_diffuse<S: Scalar>(
    x_tz: &Tensor<S>,
    t_zeta: usize,
    t_s: usize,
    eps_s: &Tensor<S>,
    s: &Schedule<S>,
) -> Result<Tensor<S>> {
    renoise(RenoiseMode::Marginal, x_tz, t_zeta, t_s, eps_s, s)
}

pub fn renoise<S: Scalar>(
    mode: RenoiseMode,
    x_tz: &Tensor<S>,
    t_zeta: usize,
    t_s: usize,
    eps_s: &Tensor<S>,
    s: &Schedule<S>,
) -> Result<Tensor<S>> {
    let n = x_tz.batch_len();
    renoise_batch(mode, x_tz, t_zeta, &vec![t_s; n], eps_s, s)
}

/// Batched [`renoise`] with one server timestep per sample.
pub fn renoise_batch<S: Scalar>(
    mode: RenoiseMode,
    x_tz: &Tensor<S>,
    t_zeta: usize,
    ts: &[usize],
    eps_s: &Tensor<S>,
    s: &Schedule<S>,
) -> Result<Tensor<S>> {
    x_tz.check_same(eps_s)?;
    check_batch(x_tz, ts.len())?;
    if t_zeta > s.steps() {
        return Err(DiffusionError::CutOutOfRange { t_zeta, steps: s.steps() });
    }
    let ab_z = s.alpha_bar(t_zeta)?;
    let per = x_tz.sample_shape().iter().product::<usize>();
    let mut out = x_tz.clone();
    for (i, &t_s) in ts.iter().enumerate() {
        if t_s <= t_zeta {
            return Err(DiffusionError::TimestepOrder { t_zeta, t_s });
        }
        let ab_s = s.alpha_bar(s.check(t_s)? + 1)?;
        let ratio = match mode {
            RenoiseMode::Marginal => ab_s / ab_z,
            RenoiseMode::Literal => ab_s,
        };
        let (a, b) = (ratio.sqrt(), (S::one() - ratio).sqrt());
        let es = &eps_s.data()[i * per..(i + 1) * per];
        for (j, o) in out.data_mut()[i * per..(i + 1) * per].iter_mut().enumerate() {
            *o = a * *o + b * es[j];
        }
    }
    Ok(out)
}

/// One ancestral step `x_t -> x_{t-1}`:
/// `(x_t - (1 - a_t) / sqrt(1 - ab_t) * eps_hat) / sqrt(a_t) + [t > 1] sqrt(b_t) z`.
pub fn reverse_step<S: Scalar>(
    x_t: &Tensor<S>,
    t: usize,
    eps_hat: &Tensor<S>,
    z: Option<&Tensor<S>>,
    s: &Schedule<S>,
) -> Result<Tensor<S>> {
    let alpha = s.alpha(t)?;
    let ab = s.alpha_bar(t)?;
    let beta = s.beta(t)?;
    let inv = S::one() / alpha.sqrt();
    let coef = (S::one() - alpha) / (S::one() - ab).sqrt();
    let mean = x_t.axpby(inv, eps_hat, -inv * coef)?;
    if t == 1 {
        return Ok(mean);
    }
    let z = z.ok_or(DiffusionError::MissingNoise(t))?;
    Ok(mean.axpby(S::one(), z, beta.sqrt())?)
}

/// Noise estimate whose implied clean sample
/// `x0 = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)` is clamped to `[-bound, bound]`.
/// Feeding the result to [`reverse_step`] gives the posterior mean around the
/// clamped `x0`.
pub fn clip_eps<S: Scalar>(x_t: &Tensor<S>, t: usize, eps_hat: &Tensor<S>, bound: S, s: &Schedule<S>) -> Result<Tensor<S>> {
    x_t.check_same(eps_hat)?;
    let ab = s.alpha_bar(s.check(t)? + 1)?;
    let (a, b) = (ab.sqrt(), (S::one() - ab).sqrt());
    let mut out = eps_hat.clone();
    for (e, &x) in out.data_mut().iter_mut().zip(x_t.data()) {
        let x0 = ((x - b * *e) / a).max(-bound).min(bound);
        *e = (x - a * x0) / b;
    }
    Ok(out)
}

/// Stretched client timestep table for collaborative inference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemapTable {
    pub steps: usize,
    pub t_zeta: usize,
    /// Largest client timestep, `floor(t_zeta + t_zeta / T * (T - t_zeta))`.
    pub m: usize,
    /// `t_zeta` integers linearly spaced from 1 to `m`.
    pub list: Vec<usize>,
}

impl RemapTable {
    /// `list[t-1] == t`, i.e. the client uses its own timesteps unchanged.
    pub fn identity(steps: usize, t_zeta: usize) -> Result<Self> {
        CutPoint::new(t_zeta, steps)?;
        Ok(Self { steps, t_zeta, m: t_zeta, list: (1..=t_zeta).collect() })
    }

    /// Schedule timestep the client uses at chain position `t` (1-based).
    pub fn client_timestep(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.t_zeta {
            return Err(DiffusionError::TimestepOutOfRange { t, steps: self.t_zeta });
        }
        Ok(self.list[t - 1])
    }
}

/// Builds the remap table; entries round to nearest, ties upward.
pub fn compute_remap(steps: usize, t_zeta: usize) -> Result<RemapTable> {
    CutPoint::new(t_zeta, steps)?;
    if steps == 0 {
        return Err(DiffusionError::CutOutOfRange { t_zeta, steps });
    }
    let m = t_zeta + (t_zeta * (steps - t_zeta)) / steps;
    let list = match t_zeta {
        0 => Vec::new(),
        1 => vec![1],
        n => {
            let den = n - 1;
            (0..n)
                .map(|i| {
                    // 1 + (m - 1) * i / den, rounded half up in exact integers.
                    let num = 2 * (den + (m - 1) * i) + den;
                    num / (2 * den)
                })
                .collect()
        }
    };
    Ok(RemapTable { steps, t_zeta, m, list })
}

/// Exact `E[eps | x_t]` when data follows `N(mu, var * I)`:
/// `sqrt(1 - ab) (x_t - sqrt(ab) mu) / (ab var + 1 - ab)`.
///
/// `mu` is either one sample (broadcast over the batch) or the full batch.
pub fn gaussian_oracle_eps<S: Scalar>(
    x_t: &Tensor<S>,
    t: usize,
    mu: &Tensor<S>,
    var: S,
    s: &Schedule<S>,
) -> Result<Tensor<S>> {
    let ab = s.alpha_bar(s.check(t)? + 1)?;
    let m = mu.numel();
    if m == 0 || !x_t.numel().is_multiple_of(m) {
        return Err(TensorError::ShapeMismatch {
            left: x_t.shape().to_vec(),
            right: mu.shape().to_vec(),
        }
        .into());
    }
    let (sa, sn) = (ab.sqrt(), (S::one() - ab).sqrt());
    let denom = ab * var + S::one() - ab;
    let md = mu.data();
    let mut out = x_t.clone();
    out.set_requires_grad(false);
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = sn * (*v - sa * md[i % m]) / denom;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(vec![v.len()], v).unwrap()
    }

    #[test]
    fn single_step_schedule() {
        let s = Schedule::linear(1, 0.1, 0.1).unwrap();
        assert_relative_eq!(s.alpha_bar(1).unwrap(), 0.9);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(Schedule::<f64>::linear(0, 0.1, 0.2).is_err());
        assert!(Schedule::<f64>::linear(10, 0.0, 0.2).is_err());
        assert!(Schedule::<f64>::linear(10, 0.3, 0.2).is_err());
        assert!(Schedule::<f64>::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn thousand_step_endpoint() {
        let s = Schedule::<f64>::linear(1000, 1e-4, 0.02).unwrap();
        // direct product of (1 - beta_t)
        let direct: f64 =
            (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
        let ab = s.alpha_bar(1000).unwrap();
        assert_relative_eq!(ab, direct, max_relative = 1e-12);
        assert!(ab > 0.0 && ab < 1e-4);
    }

    #[test]
    fn alpha_bar_recurrence_is_exact() {
        let s = Schedule::<f64>::linear(50, 1e-3, 0.3).unwrap();
        for t in 2..=50 {
            assert_eq!(s.alpha_bar(t).unwrap(), s.alpha_bar(t - 1).unwrap() * s.alpha(t).unwrap());
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
    }

    #[test]
    fn forward_limits() {
        let x0 = t1(&[0.5, -0.25]);
        let eps = t1(&[1.0, 2.0]);
        assert_eq!(diffuse_with_alpha_bar(&x0, 1.0, &eps).unwrap(), x0);
        assert_eq!(diffuse_with_alpha_bar(&x0, 0.0, &eps).unwrap(), eps);
        let s = Schedule::<f64>::scaled_linear(10).unwrap();
        assert!(matches!(
            forward_diffuse(&x0, 0, &eps, &s),
            Err(DiffusionError::TimestepOutOfRange { .. })
        ));
        assert!(matches!(
            forward_diffuse(&x0, 11, &eps, &s),
            Err(DiffusionError::TimestepOutOfRange { .. })
        ));
        assert!(forward_diffuse(&x0, 1, &t1(&[1.0]), &s).is_err());
    }

    #[test]
    fn conditional_rejects_non_increasing() {
        let s = Schedule::<f64>::scaled_linear(10).unwrap();
        let x = t1(&[0.1]);
        assert_eq!(
            conditional_diffuse(&x, 4, 4, &x, &s),
            Err(DiffusionError::TimestepOrder { t_zeta: 4, t_s: 4 })
        );
    }

    #[test]
    fn conditional_degenerate_ratio() {
        let s = Schedule::<f64>::linear(10, 1e-12, 1e-12).unwrap();
        let x = t1(&[0.3, -0.7]);
        let e = t1(&[1.0, 1.0]);
        let y = conditional_diffuse(&x, 4, 5, &e, &s).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-5);
    }

    #[test]
    fn reverse_terminal_step_ignores_noise() {
        let s = Schedule::<f64>::scaled_linear(10).unwrap();
        let x = t1(&[0.3]);
        let e = t1(&[0.1]);
        let a = reverse_step(&x, 1, &e, Some(&t1(&[5.0])), &s).unwrap();
        let b = reverse_step(&x, 1, &e, None, &s).unwrap();
        assert_eq!(a, b);
        assert_eq!(reverse_step(&x, 2, &e, None, &s), Err(DiffusionError::MissingNoise(2)));
    }

    #[test]
    fn reverse_identity_limit() {
        let s = Schedule::<f64>::linear(10, 1e-12, 1e-12).unwrap();
        let x = t1(&[0.3, 0.9]);
        let zero = t1(&[0.0, 0.0]);
        let y = reverse_step(&x, 5, &zero, Some(&t1(&[1.0, -1.0])), &s).unwrap();
        assert!(y.max_abs_diff(&x).unwrap() < 1e-5);
    }

    #[test]
    fn remap_examples() {
        assert_eq!(compute_remap(1000, 100).unwrap().m, 190);
        let r0 = compute_remap(1000, 0).unwrap();
        assert_eq!((r0.m, r0.list.len()), (0, 0));
        let rt = compute_remap(50, 50).unwrap();
        assert_eq!(rt.m, 50);
        assert_eq!(rt.list, (1..=50).collect::<Vec<_>>());
        assert!(compute_remap(10, 11).is_err());
    }

    #[test]
    fn remap_rounds_half_up() {
        // T=6, t_zeta=3: M = 3 + floor(9 / 6) = 4, linspace(1, 4, 3) = [1, 2.5, 4]
        assert_eq!(compute_remap(6, 3).unwrap().list, vec![1, 3, 4]);
        // T=10, t_zeta=4: M = 4 + floor(24 / 10) = 6, linspace(1, 6, 4) = [1, 2.67, 4.33, 6]
        assert_eq!(compute_remap(10, 4).unwrap().list, vec![1, 3, 4, 6]);
    }

    #[test]
    fn oracle_eps_examples() {
        let s = Schedule::<f64>::linear(1, 0.5, 0.5).unwrap();
        let e = gaussian_oracle_eps(&t1(&[1.0]), 1, &t1(&[0.0]), 1.0, &s).unwrap();
        assert_relative_eq!(e.data()[0], 0.5f64.sqrt(), epsilon = 1e-12);
        let mu = t1(&[0.7]);
        let xt = t1(&[0.5f64.sqrt() * 0.7]);
        let z = gaussian_oracle_eps(&xt, 1, &mu, 2.0, &s).unwrap();
        assert!(z.data()[0].abs() < 1e-15);
    }
}
