//! Labeled seed streams.
//!
//! Every random draw in the simulator comes from a [`ChaCha8Rng`] whose seed is
//! derived from the master seed, a stream label, and a list of indices
//! (vehicle id, round, message sequence number, ...). Streams are independent
//! of each other, so adding a new stream never shifts the values drawn by an
//! existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed for `(master, label, indices)`.
pub fn derive_seed(master: u64, label: &str, indices: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut s = splitmix(master ^ splitmix(h));
    for &i in indices {
        s = splitmix(s ^ splitmix(i.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    s
}

/// RNG for a labeled stream.
pub fn stream(master: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, label, indices))
}
