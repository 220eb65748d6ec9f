//! Counter-based random streams.
//!
//! Every random quantity is drawn from a ChaCha stream keyed by
//! `(root seed, domain)` and positioned by an index, so results do not
//! depend on how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains; distinct domains never share a key.
pub mod domain {
    pub const PERTURBATION_MC: u64 = 1;
    pub const REPLICATE: u64 = 2;
    pub const DESIGN: u64 = 3;
    pub const RESPONSES: u64 = 4;
    pub const DATASET_SEED: u64 = 5;
}

pub fn stream(root: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&root.to_le_bytes());
    key[8..16].copy_from_slice(&domain.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// A child seed for nested work (e.g. one bootstrap per simulated data set).
pub fn derive_seed(root: u64, domain: u64, index: u64) -> u64 {
    use rand::RngCore;
    stream(root, domain, index).next_u64()
}
