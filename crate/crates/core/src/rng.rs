//! Counter-based random streams.
//!
//! Every random draw derives from a single user seed. Independent consumers
//! get their own ChaCha stream, addressed by a `(purpose, index)` pair, so
//! adding a draw in one place never shifts the numbers seen anywhere else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CLASS_MEANS: u32 = 1;
pub const TRANSLATION: u32 = 2;
pub const SOURCE_FEATURES: u32 = 3;
pub const TARGET_FEATURES: u32 = 4;
pub const SOURCE_ORACLE: u32 = 5;
pub const TARGET_ORACLE: u32 = 6;
pub const INIT: u32 = 7;
pub const SHUFFLE: u32 = 8;
pub const AUGMENT: u32 = 9;

/// Stream `index` of family `purpose` under `seed`.
pub fn stream(seed: u64, purpose: u32, index: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 32) | index as u64);
    rng
}
