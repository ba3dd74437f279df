//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] whose seed is
//! derived from a root seed and a stream label:
//!
//! ```text
//! stream_seed = splitmix64(root ^ fnv1a64(label))
//! ```
//!
//! followed by `index` further splitmix64 rounds for numbered sub-streams
//! (folds, grid points, risks). ChaCha output is specified bit-for-bit, so a
//! given (root, label, index) yields the same numbers on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed for the `index`-th sub-stream of `label` under `root`.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut s = splitmix64(root ^ fnv1a64(label));
    for _ in 0..=index {
        s = splitmix64(s);
    }
    s
}

pub fn stream(root: u64, label: &str) -> StreamRng {
    substream(root, label, 0)
}

pub fn substream(root: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label, index))
}
