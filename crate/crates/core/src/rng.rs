//! Seeding rules. One root seed drives everything; named stages and
//! per-item streams get independent generators derived by hashing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `seed XOR h(tag)`, where `h` is the first 8 bytes (little-endian) of SHA-256 of the tag.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let digest = Sha256::digest(tag.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&digest[..8]);
    seed ^ u64::from_le_bytes(b)
}

/// Independent generator for item `path` under `seed`. Used wherever work may
/// be split across threads so that results do not depend on scheduling.
pub fn stream(seed: u64, path: &[u64]) -> SeededRng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}
