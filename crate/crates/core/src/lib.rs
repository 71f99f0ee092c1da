//! Split-diffusion training and inference.
//!
//! A denoising chain of `T` steps is cut at `t_zeta`: a shared server model
//! runs the noisy steps `T..=t_zeta+1`, each client finishes `t_zeta..=1`
//! with a private model. Training follows the same split: clients fit the
//! low-noise steps on their own data and upload only re-noised samples above
//! the cut.
//!
//! The numeric core ([`tensor`], [`autograd`], [`optim`], [`diffusion`],
//! [`metrics::linalg`]) is generic over [`Scalar`]; everything above it
//! works in `f64` through the aliases below.

pub mod autograd;
mod bytes;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod metrics;
pub mod nodes;
pub mod optim;
pub mod protocol;
pub mod rng;
pub mod tensor;

use num_traits::{Float, FromPrimitive, NumAssign};
use std::fmt::Debug;
use std::iter::Sum;

/// Real element type accepted by the numeric core.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Default + Send + Sync + 'static
{
    /// Lossless-enough conversion from an `f64` literal.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("scalar literal")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Compute type used by models, nodes and metrics.
pub type Real = f64;

pub type Tensor = tensor::Tensor<Real>;
pub type Graph = autograd::Graph<Real>;
pub type Adam = optim::Adam<Real>;
pub type Schedule = diffusion::Schedule<Real>;
pub type FeatureStats = metrics::FeatureStats<Real>;

pub use autograd::Var;
pub use diffusion::{CutPoint, RemapTable};
