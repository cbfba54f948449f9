use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Independent deterministic RNG stream for `(seed, purpose, index)`.
pub fn derive_rng(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let mut bytes = Vec::with_capacity(16 + purpose.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(purpose.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    ChaCha8Rng::seed_from_u64(fnv1a64(&bytes))
}
