//! Seed derivation for independent random streams.

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a sub-seed for stream `tag` under `seed`.
pub fn mix(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Folds raw value bits into a running hash.
pub(crate) fn mix_bits(h: u64, bits: u64) -> u64 {
    splitmix64(h ^ bits).rotate_left(17)
}
