//! Keyed random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by
//! `(global seed, trajectory seed, purpose tag)`, so initial conditions,
//! material draws, splits, shuffles and initializations never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags; the string is hashed into the ChaCha stream id.
pub mod tags {
    pub const INITIAL_CONDITION: &str = "initial-condition";
    pub const MATERIAL: &str = "material";
    pub const SPLIT: &str = "validation-split";
    pub const SHUFFLE: &str = "minibatch-shuffle";
    pub const INIT: &str = "weight-init";
}

/// FNV-1a, 64 bit.
fn tag_hash(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn stream(global_seed: u64, trajectory_seed: u64, tag: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&global_seed.to_le_bytes());
    key[8..16].copy_from_slice(&trajectory_seed.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(tag_hash(tag));
    rng
}
