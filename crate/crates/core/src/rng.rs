//! Seeded random number generation.
//!
//! Every stochastic routine in the crate draws from [`Rng`], a ChaCha8 stream
//! cipher generator. ChaCha output is specified bit-for-bit, so a given seed
//! reproduces the same samples on every platform.

use rand::SeedableRng;

pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent sub-stream `stream` of `seed`, for per-item generators whose
/// output must not depend on processing order.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
