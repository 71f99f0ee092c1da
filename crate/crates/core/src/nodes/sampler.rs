use super::Result;
use crate::denoiser::DenoiserModel;
use crate::diffusion::{clip_eps, reverse_step};
use crate::rng::normal_tensor;
use crate::{Real, Schedule, Tensor};
use rand::Rng;

/// Runs reverse steps for chain positions `hi` down to `lo` (inclusive).
/// Position `t` uses schedule timestep `map(t)`; fresh noise is drawn
/// whenever that timestep exceeds 1. With `clip`, the implied clean sample
/// is clamped to `[-clip, clip]` at every step.
#[allow(clippy::too_many_arguments)]
pub fn denoise_range<R: Rng + ?Sized>(
    model: &DenoiserModel,
    schedule: &Schedule,
    mut x: Tensor,
    labels: Option<&[u32]>,
    hi: usize,
    lo: usize,
    map: impl Fn(usize) -> Result<usize>,
    clip: Option<Real>,
    rng: &mut R,
) -> Result<Tensor> {
    if lo == 0 {
        return Err(crate::diffusion::DiffusionError::TimestepOutOfRange { t: 0, steps: hi }.into());
    }
    for t in (lo..=hi).rev() {
        let tm = map(t)?;
        let mut eps = model.predict_at(&x, tm, labels)?;
        if let Some(c) = clip {
            eps = clip_eps(&x, tm, &eps, c, schedule)?;
        }
        let z = (tm > 1).then(|| normal_tensor(rng, x.shape()));
        x = reverse_step(&x, tm, &eps, z.as_ref(), schedule)?;
    }
    Ok(x)
}

/// Ordinary single-model ancestral sampling from `x_T ~ N(0, I)`.
pub fn sample_monolithic<R: Rng + ?Sized>(
    model: &DenoiserModel,
    schedule: &Schedule,
    labels: Option<&[u32]>,
    count: usize,
    clip: Option<Real>,
    rng: &mut R,
) -> Result<Tensor> {
    let mut shape = vec![count];
    shape.extend_from_slice(model.in_shape());
    let x = normal_tensor(rng, &shape);
    denoise_range(model, schedule, x, labels, schedule.steps(), 1, Ok, clip, rng)
}
