//! Deterministic seed derivation: every randomized stage derives its own
//! stream from one user-facing seed, so whole pipelines replay bit-identically.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// splitmix64-style mix of a base seed and a stream tag.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(base: u64, stream: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(derive_seed(base, stream))
}
