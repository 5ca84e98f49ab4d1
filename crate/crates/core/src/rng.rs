//! Seed derivation and the hash primitives behind procedural textures.
//!
//! Every episode, trial, and shuffle draws from its own substream derived
//! from a master seed and a stream index. Substreams are independent of
//! execution order, which is what makes parallel collection deterministic.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Finalizer from the splitmix64 generator; full-avalanche 64-bit mixer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for stream `index` under `master`.
pub fn substream(master: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(master ^ mix64(index.wrapping_add(1))))
}

/// Hash of up to three lattice coordinates plus a seed, as a float in [0, 1).
pub fn hash01(seed: u64, a: i64, b: i64, c: i64) -> f64 {
    let h = mix64(
        seed ^ mix64(a as u64 ^ 0xa076_1d64_78bd_642f)
            ^ mix64((b as u64).wrapping_mul(0xe703_7ed1_a0b4_28db))
            ^ mix64((c as u64).wrapping_mul(0x8ebc_6af0_9c88_c6e3)),
    );
    (h >> 11) as f64 / (1u64 << 53) as f64
}
