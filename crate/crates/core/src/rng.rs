//! Deterministic random streams.
//!
//! Every consumer of randomness draws from a ChaCha stream identified by a
//! `(seed, stream id)` pair, so two runs that share a seed see identical
//! sampling and noise draws regardless of the dataset they are fed.

use alloc::vec::Vec;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Batch index draws.
pub const SAMPLING: u64 = 0;
/// Gaussian noise for the first oracle slot (or the only slot).
pub const NOISE_FIRST: u64 = 1;
/// Gaussian noise for the second oracle slot.
pub const NOISE_SECOND: u64 = 2;
/// Dataset generation.
pub const DATA: u64 = 3;
/// Test-harness randomness (differing index, replacement point).
pub const TRIAL: u64 = 4;
const DERIVE: u64 = 0xd1b5_4a32_d192_ed03;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Child seed number `index` of `master`; random access, no shared state.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut rng = stream(master, DERIVE);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}
