//! Counter-based random streams.
//!
//! Every parallel unit of work draws from its own ChaCha stream keyed by
//! `(seed, iteration)` and addressed by `(phase, unit)`. No generator state
//! is carried between iterations, so results are independent of the thread
//! count and a chain can be resumed from its iteration number alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Work phases within one iteration; each gets its own stream namespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Phase {
    Init = 1,
    Latent = 2,
    Membership = 3,
    Hyper = 4,
    Theta = 5,
    Simulate = 6,
    Split = 7,
    Score = 8,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for work unit `unit` of `phase` at `iteration`.
pub fn stream(seed: u64, iteration: u64, phase: Phase, unit: u64) -> ChaCha8Rng {
    let mut s = seed ^ iteration.wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(((phase as u64) << 56) ^ unit);
    rng
}
