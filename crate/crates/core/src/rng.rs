//! Named, hierarchical random streams.
//!
//! Every random draw in the engine comes from a ChaCha stream whose seed is
//! derived from the run's root seed, a purpose tag and a list of indices
//! (epoch, sample, view, ...). Streams are therefore independent of batching
//! and evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from a root seed, a tag and a path of indices.
pub fn derive_seed(root: u64, tag: &str, path: &[u64]) -> u64 {
    // FNV-1a over the tag keeps tags stable across builds.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut s = splitmix64(root ^ splitmix64(h));
    for &p in path {
        s = splitmix64(s ^ splitmix64(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    s
}

/// Creates the random stream for `(root, tag, path)`.
pub fn stream(root: u64, tag: &str, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(root, tag, path))
}
