//! Named, seeded random streams.
//!
//! Every stochastic choice in an experiment draws from a stream derived from
//! the experiment seed, a stream name and an index, so stages can run in any
//! order (or in parallel) and still reproduce bit-identically.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream names used by the pipeline.
pub mod streams {
    pub const DATA: &str = "data";
    pub const PARTITION: &str = "partition";
    pub const SPLIT: &str = "split";
    pub const INIT: &str = "init";
    pub const CLIENT: &str = "client";
    pub const PROBE: &str = "probe";
    pub const KMEANS: &str = "kmeans";
    pub const SYNTHESIS: &str = "synthesis";
    pub const BILEVEL: &str = "bilevel";
    pub const CLUSTER_INIT: &str = "cluster-init";
    pub const PERSONALIZE: &str = "personalize";
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit sub-seed from `(seed, name, index)`.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    // FNV-1a over the name keeps the mapping stable across platforms.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(seed ^ h).wrapping_add(index))
}

pub fn stream(seed: u64, name: &str, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(seed, name, index))
}

pub fn from_seed(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}
