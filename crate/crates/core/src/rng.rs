//! Seed bookkeeping. Every source of randomness in a run is a named child
//! of the experiment's root seed so recorded manifests replay exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Stable 64-bit mix (splitmix64 finalizer).
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// FNV-1a over a byte string; used to derive per-purpose seeds and
/// per-configuration deterministic noise.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive a child seed from a root seed and a purpose tag.
///
/// The derivation is a pure function of its inputs, so a manifest that
/// records the root seed fully determines every stream.
pub fn derive_seed(root: u64, tag: &str) -> u64 {
    mix(root ^ fnv1a(tag.as_bytes()))
}

/// Seeded generator for the named purpose.
pub fn rng_for(root: u64, tag: &str) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(derive_seed(root, tag))
}

/// Seeded generator for an indexed purpose (per-candidate, per-iteration...).
pub fn rng_for_indexed(root: u64, tag: &str, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(mix(derive_seed(root, tag) ^ mix(index)))
}
