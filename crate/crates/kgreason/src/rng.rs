//! Deterministic named RNG substreams.
//!
//! Every randomized stage derives its own generator from a root seed plus a
//! stable label, so stages can be reordered or rerun independently without
//! perturbing each other's draws. The label hash is FNV-1a (fixed here, not
//! the std hasher, which is free to change between releases).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a byte string.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// A deterministic generator for the substream `label` under `seed`.
pub fn substream(seed: u64, label: &str) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(label.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&fnv1a(b"kgreason.substream").to_le_bytes());
    ChaCha12Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn fnv1a_known_vectors() {
        // Reference values for the 64-bit FNV-1a test suite.
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn same_label_same_stream() {
        let a: Vec<u32> = substream(7, "queries/1p").sample_iter(rand::distributions::Standard).take(8).collect();
        let b: Vec<u32> = substream(7, "queries/1p").sample_iter(rand::distributions::Standard).take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn different_labels_differ() {
        let a: Vec<u32> = substream(7, "queries/1p").sample_iter(rand::distributions::Standard).take(8).collect();
        let b: Vec<u32> = substream(7, "queries/2p").sample_iter(rand::distributions::Standard).take(8).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a: Vec<u32> = substream(7, "x").sample_iter(rand::distributions::Standard).take(8).collect();
        let b: Vec<u32> = substream(8, "x").sample_iter(rand::distributions::Standard).take(8).collect();
        assert_ne!(a, b);
    }
}
