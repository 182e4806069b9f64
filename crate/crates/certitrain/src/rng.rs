//! Deterministic RNG streams.
//!
//! Every random decision in the engine draws from a ChaCha stream derived
//! from a user seed plus a fixed purpose tag (and optional indices). Streams
//! for different purposes never overlap, and per-example streams make
//! example-level work order-independent: evaluating example i uses the same
//! stream whether it runs first, last, or on another thread.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Purpose tags for stream derivation. The values are arbitrary but frozen:
/// changing them changes every seeded run.
pub mod stream {
    pub const INIT: u64 = 0x696e_6974;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const ATTACK: u64 = 0x6174_746b;
    pub const EVAL: u64 = 0x6576_616c;
    pub const DATA: u64 = 0x6461_7461;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives an independent ChaCha stream from `seed` and a tag sequence.
pub fn derive_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix64(seed);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Standard normal draw (Box-Muller). Uses `1 - u` so the log argument is
/// never zero.
pub fn sample_standard_normal<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
