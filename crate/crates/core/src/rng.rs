//! Seeded, counter-based random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from a
//! `(seed, stream id)` pair, so parallel scheduling or extra draws in one
//! consumer never shift another consumer's values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SampleRng = ChaCha8Rng;

/// Stream carrying the backbone latent `z` (initial draw and per-step noise).
pub const STREAM_LATENT: u64 = 0;
/// Base id for the per-modality latents `w_c`; modality `i` uses `STREAM_GUIDED + i`.
pub const STREAM_GUIDED: u64 = 0x100;
pub const STREAM_SCENE: u64 = 0x200;
pub const STREAM_MASK: u64 = 0x300;
pub const STREAM_TRAIN: u64 = 0x400;
pub const STREAM_INIT: u64 = 0x500;
pub const STREAM_EVAL: u64 = 0x600;

pub fn stream(seed: u64, id: u64) -> SampleRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
