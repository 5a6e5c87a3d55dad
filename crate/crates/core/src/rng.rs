//! Per-path random streams.
//!
//! Every path (or SDE trajectory) owns the ChaCha8 stream selected by its
//! index under a shared key, so results do not depend on how paths are
//! scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for path `stream` under key `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
