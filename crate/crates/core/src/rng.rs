//! Counter-based random substreams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha stream for `(seed, round, index)`.
///
/// The stream id packs `round` into the high 32 bits and `index` into the low
/// 32, so draws never depend on scheduling order.
pub fn substream(seed: u64, round: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((round << 32) | (index & 0xffff_ffff));
    rng
}

/// Stream for the `k`-th run of a multi-seed sweep.
pub fn seed_for(master: u64, k: u64) -> u64 {
    let mut rng = substream(master, u64::from(u32::MAX), k);
    rand::Rng::random(&mut rng)
}
