//! Seeding. A single experiment seed expands into independent per-component
//! streams through [`split_seed`], so results do not depend on how work is
//! scheduled.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type DetRng = ChaCha8Rng;

/// Derive a child seed: the first eight bytes (little-endian) of
/// `SHA-256(seed.to_le_bytes() || label)`.
pub fn split_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Child seed keyed by an integer index, e.g. a training step.
pub fn split_seed_index(seed: u64, label: &str, index: u64) -> u64 {
    split_seed(seed, &format!("{label}#{index}"))
}

pub fn rng_from_seed(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn gaussian_vec_seeded(seed: u64, n: usize) -> Vec<f64> {
    gaussian_vec(&mut rng_from_seed(seed), n)
}

/// `k` distinct indices out of `0..n`, uniformly without replacement.
pub fn choose_indices(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    sample(rng, n, k).into_vec()
}
