//! Deterministic seed derivation for parallel Monte Carlo.
//!
//! Every stochastic routine takes a master seed and derives per-stream seeds
//! by stable mixing of (master, stream tag, index). Workers may then run in
//! any order or thread count and still reproduce bit-identical ensembles.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stream tags keep independent uses of the same master seed decorrelated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    SlowNoise,
    FastNoise,
    Checker,
    Ergodic,
    Dual,
    Generic,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::SlowNoise => 0x5e0f_11aa,
            Stream::FastNoise => 0xfa57_22bb,
            Stream::Checker => 0xc4ec_33cc,
            Stream::Ergodic => 0xe9d0_44dd,
            Stream::Dual => 0xd0a1_55ee,
            Stream::Generic => 0x9e4e_66ff,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit mix of (master seed, stream, index).
pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream.tag())) ^ splitmix64(index))
}

/// RNG for one derived stream.
pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(master, stream, index))
}
