//! Seed derivation. Every random stream in a run is a pure function of the
//! master seed and a small tuple of coordinates, so results do not depend on
//! the order in which clients execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Distinct tags keep streams with equal coordinates apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Sampling = 2,
    Client = 3,
    Partition = 4,
    Split = 5,
    ToyTrain = 6,
    ToyTest = 7,
    TestHoldout = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, stream: Stream, coords: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ (stream as u64).rotate_left(32));
    for &c in coords {
        h = splitmix64(h ^ c);
    }
    h
}

pub fn stream_rng(master: u64, stream: Stream, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, coords))
}
