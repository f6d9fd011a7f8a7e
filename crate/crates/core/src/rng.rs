//! Counter-based random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as Rng;

/// Stream tags keeping independent consumers apart.
pub mod stream {
    pub const SCENE: u64 = 0;
    pub const INIT: u64 = 0x1000;
    pub const TRAIN: u64 = 0x2000;
    pub const CCD_SAMPLE: u64 = 0x3000;
    pub const GRADCHECK: u64 = 0x4000;
}

/// ChaCha stream keyed by `(seed, index, stream)`; portable and stateless.
pub fn keyed_rng(seed: u64, index: u64, stream: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&stream.to_le_bytes());
    key[24..].copy_from_slice(b"spclrng1");
    ChaCha8Rng::from_seed(key)
}
