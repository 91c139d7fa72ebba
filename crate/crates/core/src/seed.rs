//! Seeded random streams and order-independent child-seed derivation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used by every sampling routine in the crate.
pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mix(mut z: u64) -> u64 {
    // splitmix64 finaliser
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn tag_hash(tag: &str) -> u64 {
    // FNV-1a, stable across platforms and releases
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Child seed for `(master, role, indices...)`. Depends only on its arguments,
/// never on the order in which replicates are produced.
pub fn derive_seed(master: u64, role: &str, indices: &[u64]) -> u64 {
    let mut h = mix(master ^ tag_hash(role));
    for &i in indices {
        h = mix(h ^ mix(i));
    }
    h
}
