//! Counter-based random streams for reproducible parallel Monte Carlo.
//!
//! Every consumer derives its own ChaCha12 stream from the master seed, a
//! domain tag, and its indices, so path `p` is bit-reproducible no matter
//! how many paths are drawn or in which order:
//!
//! * chain paths:    `(master_seed, "chainpth", path_index)`
//! * Brownian paths: `(master_seed, "brownian", chain_index, bm_index)`,
//!   with the increment for step `k` always at word position `4k`
//! * perturbation directions: `(master_seed, "pertdirs", 0)`
//!
//! Brownian draws consume exactly two 64-bit words per step (one
//! Box-Muller pair, cosine branch), which makes sequential bulk
//! generation identical to random access via [`normal_at_step`].

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::scalar;

const DOMAIN_CHAIN: &[u8; 8] = b"chainpth";
const DOMAIN_BROWNIAN: &[u8; 8] = b"brownian";
const DOMAIN_DIRECTION: &[u8; 8] = b"pertdirs";

/// Words consumed per Brownian step (two u64 draws).
const WORDS_PER_STEP: u128 = 4;

fn derive(master_seed: u64, domain: &[u8; 8], stream: u64) -> ChaCha12Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(domain);
    let mut rng = ChaCha12Rng::from_seed(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for chain path `path_index`.
pub fn chain_rng(master_seed: u64, path_index: u64) -> ChaCha12Rng {
    derive(master_seed, DOMAIN_CHAIN, path_index)
}

/// Stream for the Brownian increments of inner path `bm_index` under
/// outer chain path `chain_index`.
pub fn brownian_rng(master_seed: u64, chain_index: u32, bm_index: u32) -> ChaCha12Rng {
    derive(
        master_seed,
        DOMAIN_BROWNIAN,
        ((chain_index as u64) << 32) | bm_index as u64,
    )
}

/// Stream for seeded perturbation directions.
pub fn direction_rng(master_seed: u64) -> ChaCha12Rng {
    derive(master_seed, DOMAIN_DIRECTION, 0)
}

/// Maps 64 random bits to a uniform in the half-open interval `(0, 1]`.
#[inline(always)]
pub fn u64_to_open01(bits: u64) -> f64 {
    ((bits >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
}

/// One standard normal draw via Box-Muller (cosine branch); consumes
/// exactly two `u64` words.
#[inline]
pub fn standard_normal<R: RngCore>(rng: &mut R) -> f64 {
    let u1 = u64_to_open01(rng.next_u64());
    let u2 = u64_to_open01(rng.next_u64());
    scalar::sqrt(-2.0 * scalar::ln(u1)) * scalar::cos(2.0 * core::f64::consts::PI * u2)
}

/// Exponential draw with the given rate; consumes one `u64`.
#[inline]
pub fn exponential<R: RngCore>(rng: &mut R, rate: f64) -> f64 {
    debug_assert!(rate > 0.0);
    -scalar::ln(u64_to_open01(rng.next_u64())) / rate
}

/// Uniform in `(0, 1]`; consumes one `u64`.
#[inline]
pub fn uniform_open01<R: RngCore>(rng: &mut R) -> f64 {
    u64_to_open01(rng.next_u64())
}

/// The normal increment for a given step, independent of draw order.
pub fn normal_at_step(rng: &mut ChaCha12Rng, step: u64) -> f64 {
    rng.set_word_pos(step as u128 * WORDS_PER_STEP);
    standard_normal(rng)
}

/// Fills `out` with the increments for steps `start_step ..`, sequentially.
/// Bit-identical to calling [`normal_at_step`] per entry.
pub fn fill_normals(rng: &mut ChaCha12Rng, start_step: u64, out: &mut [f64]) {
    rng.set_word_pos(start_step as u128 * WORDS_PER_STEP);
    for slot in out.iter_mut() {
        *slot = standard_normal(rng);
    }
}
