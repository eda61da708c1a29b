//! Small text and hashing helpers shared by the featurizer, the filters and
//! the audit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Lowercases `text` and splits it on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whitespace token count, used for revision length deltas and dataset stats.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// An RNG whose stream depends only on `(seed, key)`, so draws made for one
/// item do not depend on how many other items were processed before it.
pub fn keyed_rng(seed: u64, key: &str) -> ChaCha8Rng {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.push(0xff);
    bytes.extend_from_slice(key.as_bytes());
    let lo = fnv1a(&bytes);
    bytes.push(0x5a);
    let hi = fnv1a(&bytes);
    let mut full = [0u8; 32];
    full[..8].copy_from_slice(&lo.to_le_bytes());
    full[8..16].copy_from_slice(&hi.to_le_bytes());
    full[16..24].copy_from_slice(&seed.to_le_bytes());
    full[24..].copy_from_slice(&(key.len() as u64).to_le_bytes());
    ChaCha8Rng::from_seed(full)
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
