//! Counter-based random streams.
//!
//! Every random quantity is addressed by `(seed, stream, position)`, so a
//! value can be regenerated in isolation and parallel producers never share
//! sequence state.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream id reserved for bond rates.
pub const ENV_STREAM: u64 = 0;

const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

/// Maps 64 random bits to a uniform in `[0, 1)`.
#[inline]
pub fn unit_closed_open(bits: u64) -> f64 {
    (bits >> 11) as f64 * INV_2_53
}

/// Maps 64 random bits to a uniform in `(0, 1]`.
#[inline]
pub fn unit_open_closed(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * INV_2_53
}

/// A ChaCha8 generator positioned at the start of `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The `index`-th 64-bit word pair of `stream`, read by random access.
pub fn word_at(seed: u64, stream: u64, index: u64) -> u64 {
    let mut rng = stream_rng(seed, stream);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}

/// Fills `out` with words `start..start + out.len()` of `stream`.
pub fn fill_words(seed: u64, stream: u64, start: u64, out: &mut [u64]) {
    let mut rng = stream_rng(seed, stream);
    rng.set_word_pos(2 * start as u128);
    for slot in out.iter_mut() {
        *slot = rng.next_u64();
    }
}

/// SplitMix64 finalizer; used to derive child seeds from a parent seed.
pub fn derive_seed(seed: u64, key: u64) -> u64 {
    let mut z = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
