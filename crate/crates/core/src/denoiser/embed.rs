use super::{ModelError, Result};
use crate::Real;

/// Sinusoidal timestep encoding of `1000 * t / T`.
///
/// Entry `2i` is `sin(arg * f_i)` and `2i + 1` is `cos(arg * f_i)` with
/// `f_i = 10000^(-i / (dim / 2))`.
pub fn time_embedding(t: usize, dim: usize, steps: usize) -> Result<Vec<Real>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(ModelError::BadDim(dim));
    }
    if t == 0 || t > steps {
        return Err(ModelError::Timestep { t, steps });
    }
    let half = dim / 2;
    let arg = 1000.0 * t as Real / steps as Real;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000.0 as Real).ln() * i as Real / half as Real).exp();
        out.push((arg * freq).sin());
        out.push((arg * freq).cos());
    }
    Ok(out)
}
