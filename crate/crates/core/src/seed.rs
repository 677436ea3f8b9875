//! Every stochastic step draws from a stream derived from one run seed and a
//! purpose label, so streams are independent and reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&out[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_for(seed: u64, label: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}
