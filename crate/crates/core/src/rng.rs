//! Counter-based random streams.
//!
//! Every random draw in a run comes from a stream addressed by a key tuple
//! (master seed, purpose, indices...). A stream is a ChaCha8 generator seeded
//! from a SplitMix64 fold of the key, so the numbers a given env or phase sees
//! depend only on its key and never on thread count or evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of every key so purposes never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Reset = 2,
    Action = 3,
    Shuffle = 4,
    Follower = 5,
    Probe = 6,
    DiscShuffle = 7,
    Synthetic = 8,
    Eval = 9,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a key tuple into a 64-bit stream id.
pub fn stream_id(master_seed: u64, purpose: Purpose, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master_seed ^ 0x5EED_0000_0000_0000);
    h = splitmix64(h ^ purpose as u64);
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

/// Opens the stream for `(master_seed, purpose, indices...)`.
pub fn stream(master_seed: u64, purpose: Purpose, indices: &[u64]) -> ChaCha8Rng {
    let id = stream_id(master_seed, purpose, indices);
    let mut seed = [0u8; 32];
    for (k, chunk) in seed.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(id.wrapping_add(k as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}
