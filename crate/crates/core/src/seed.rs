//! Stable seed derivation.
//!
//! A derived seed is the first eight bytes (little-endian) of
//! `SHA-256("{master_seed}/{part_0}/{part_1}/...")`. Every random stream in a
//! run is keyed this way, so an experiment is reproducible from its manifest
//! and master seed alone, independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(master_seed: u64, parts: &[&str]) -> u64 {
    let mut key = master_seed.to_string();
    for p in parts {
        key.push('/');
        key.push_str(p);
    }
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(master_seed: u64, parts: &[&str]) -> Rng {
    rng_from_seed(derive_seed(master_seed, parts))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
