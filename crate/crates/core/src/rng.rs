//! Counter-based random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a tuple of counters, so the
//! draws for a given `(seed, epoch, batch, row)` never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Reserved batch counters for streams that are not per-row training draws.
pub mod tag {
    pub const SHUFFLE: u64 = u64::MAX;
    pub const INIT: u64 = u64::MAX - 1;
    pub const GENERATE: u64 = u64::MAX - 2;
    pub const MISC: u64 = u64::MAX - 3;
}

/// Stream for one `(seed, epoch, batch, row)` coordinate.
pub fn stream(seed: u64, epoch: u64, batch: u64, row: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&batch.to_le_bytes());
    key[24..32].copy_from_slice(&row.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub fn row_stream(seed: u64, epoch: u64, batch: u64, row: u64) -> StreamRng {
    stream(seed, epoch, batch, row)
}

pub fn init_stream(seed: u64) -> StreamRng {
    stream(seed, 0, tag::INIT, 0)
}

pub fn shuffle_stream(seed: u64, epoch: u64) -> StreamRng {
    stream(seed, epoch, tag::SHUFFLE, 0)
}

pub fn generate_stream(seed: u64, chain: u64) -> StreamRng {
    stream(seed, 0, tag::GENERATE, chain)
}
