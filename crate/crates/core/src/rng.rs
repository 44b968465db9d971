//! Seed derivation for independent, reproducible RNG streams.
//!
//! Every source of randomness in the crate is keyed by (master seed,
//! domain, index) so that corpus generation, mask sampling, and
//! initialization stay deterministic regardless of execution order, and
//! training can resume mid-run without storing RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Each gets a disjoint seed space.
#[derive(Debug, Clone, Copy)]
pub enum Domain {
    Corpus = 1,
    Init = 2,
    Mask = 3,
    Batch = 4,
    KMeans = 5,
    Eval = 6,
    Dropout = 7,
}

/// FNV-1a over a name, for order-independent per-parameter streams.
pub fn name_index(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mix (master, domain, index) into a stream seed.
pub fn stream_seed(master: u64, domain: Domain, index: u64) -> u64 {
    let a = splitmix64(master ^ (domain as u64).wrapping_mul(0xa076_1d64_78bd_642f));
    splitmix64(a ^ index.wrapping_mul(0xe703_7ed1_a0b4_28db))
}

/// A ChaCha stream for the given (master, domain, index) triple.
pub fn stream_rng(master: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, domain, index))
}
