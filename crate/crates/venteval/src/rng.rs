//! Seed derivation helpers.
//!
//! All stochastic code in this crate draws from `ChaCha8Rng` streams whose
//! seeds are derived with the stable mixers below, so results are
//! reproducible across runs, platforms, and thread counts. `std`'s hashers
//! are deliberately avoided: their output is not stable across releases.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a. Stable, non-cryptographic; used for seed derivation and
/// manifest content hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer; decorrelates sequential seeds.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and an integer stream id.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream))
}

/// Derive a child seed from a parent seed and a string key (e.g. episode id).
pub fn derive_seed_str(seed: u64, key: &str) -> u64 {
    splitmix64(seed ^ fnv1a64(key.as_bytes()))
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal draw via Box-Muller (two uniforms per pair of deviates;
/// we discard the second to keep call sites stateless).
pub fn standard_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    // Open interval (0,1] for the log argument.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
