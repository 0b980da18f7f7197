//! Seed derivation for independent sub-streams.

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed for item `(a, b)` under `base`, e.g. `(model, trial)`.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(base) ^ a) ^ b.rotate_left(32))
}
