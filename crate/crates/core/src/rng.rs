//! Seeded random streams.
//!
//! Every node owns one ChaCha stream derived from the run seed and a
//! per-node tag, so draws never interleave between nodes.

use crate::Tensor;
use crate::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type NodeRng = ChaCha8Rng;

/// SplitMix64 finalizer; mixes a seed with a tag into an independent seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn seeded(seed: u64) -> NodeRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream for node `tag` under run seed `seed`.
pub fn node_rng(seed: u64, tag: u64) -> NodeRng {
    seeded(derive_seed(seed, tag))
}

/// Stream tags for the node kinds.
pub mod tags {
    pub const SERVER: u64 = 0x5E_0000;
    pub const DATA: u64 = 0xDA_0000;
    pub fn client(id: u32) -> u64 {
        0xC1_0000 + id as u64
    }
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Real> {
    (0..n).map(|_| rng.sample::<Real, _>(StandardNormal)).collect()
}

pub fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n)).expect("shape matches length")
}

/// Uniform integer in `lo..=hi`.
pub fn uniform_int<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}
