//! Seed derivation: every random stream in the crate is keyed by
//! (user seed, stream tag, index) so runs are reproducible bit for bit and
//! streams cannot collide across subsystems.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_MEANS: u64 = 2;
pub(crate) const STREAM_UTTERANCE: u64 = 3;
pub(crate) const STREAM_EPOCH: u64 = 4;
pub(crate) const STREAM_COST: u64 = 5;

pub(crate) fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    bytes[8..16].copy_from_slice(&stream.to_le_bytes());
    bytes[16..24].copy_from_slice(&index.to_le_bytes());
    bytes[24..].copy_from_slice(&0x6d66_6365u64.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}
