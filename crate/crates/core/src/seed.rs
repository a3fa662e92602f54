//! Seed derivation: every random stream in a run is a child of the master
//! seed, keyed by a string label such as `"branch:3"`, `"noise"` or `"init"`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngPolicy {
    pub master_seed: u64,
}

impl RngPolicy {
    pub fn new(master_seed: u64) -> Self {
        Self { master_seed }
    }

    pub fn seed(&self, label: &str) -> u64 {
        derive_seed(self.master_seed, label)
    }

    pub fn rng(&self, label: &str) -> Rng {
        rng_from_seed(self.seed(label))
    }

    pub fn child(&self, label: &str) -> RngPolicy {
        RngPolicy::new(self.seed(label))
    }
}

// splitmix64 finalizer
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// hash64(master, label): FNV-1a over the label, folded into the master seed
/// and finalized with splitmix64.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix64(mix64(master.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ h)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
