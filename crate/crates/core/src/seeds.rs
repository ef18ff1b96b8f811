//! Deterministic seed derivation for independent random streams.

/// One round of the SplitMix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of stream `stream` under master seed `seed`.
pub fn derive(seed: u64, stream: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ stream)
}

/// Hash of a word sequence under `seed`; order of words matters.
pub fn hash_words(seed: u64, words: &[u64]) -> u64 {
    words.iter().fold(splitmix64(seed), |h, w| splitmix64(h ^ w))
}
