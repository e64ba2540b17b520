//! Counter-based random streams.
//!
//! Every simulated draw gets its own ChaCha stream addressed by
//! `(seed, phase, index)`, so results do not depend on the order or the
//! thread in which draws are evaluated.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which part of a run a draw belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Phase {
    Pilot = 0,
    Main = 1,
    Predictive = 2,
    // synthetic data generation
    SynthInputs = 16,
    SynthNoise = 17,
    /// Per-cycle seeds of a simulated fleet.
    Fleet = 18,
}

/// Words reserved per draw; a draw consuming more would run into its
/// neighbour's stream.
const WORDS_PER_DRAW_LOG2: u32 = 36;

/// The generator for draw `index` of `phase` under `seed`.
pub fn substream(seed: u64, phase: Phase, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase as u64);
    rng.set_word_pos(u128::from(index) << WORDS_PER_DRAW_LOG2);
    rng
}
