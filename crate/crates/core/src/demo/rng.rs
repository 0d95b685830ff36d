//! Counter-based uniform generator for the simulation demo.
//!
//! `uniform(seed, agent, year, stream)` hashes the four counters through the
//! SplitMix64 finalizer:
//!
//! ```text
//! h = mix(mix(mix(mix(seed) ^ agent) ^ year) ^ stream)
//! u = (h >> 11) * 2^-53
//! ```
//!
//! where `mix(z)` adds 0x9E3779B97F4A7C15 and applies the SplitMix64
//! output function. Every draw is addressable, so results do not depend on
//! evaluation order and are easy to reproduce in other languages.

pub const STREAM_DEATH: u64 = 0;
pub const STREAM_COPD: u64 = 1;
pub const STREAM_EXAC: u64 = 2;

pub fn mix(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A uniform draw in `[0, 1)` with 53 bits of resolution.
pub fn uniform(seed: u64, agent: u64, year: u64, stream: u64) -> f64 {
    let h = mix(mix(mix(mix(seed) ^ agent) ^ year) ^ stream);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Poisson(`lambda`) by CDF inversion of one uniform.
pub fn poisson(lambda: f64, u: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    let mut k = 0u64;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let cap = (lambda + 40.0 * lambda.sqrt() + 40.0) as u64;
    while u >= cdf && k < cap {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}
