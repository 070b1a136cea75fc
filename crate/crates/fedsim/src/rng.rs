//! Deterministic stream derivation.
//!
//! Every random decision in a run is drawn from a ChaCha stream derived from
//! the experiment seed plus a fixed set of tags (purpose, round, client).
//! Separate streams keep results schedule-independent: the private-model
//! phase of a client update, for example, never disturbs the minibatch
//! sequence of the shared-model phase, and parallel execution of clients
//! within a round is bitwise identical to serial execution.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Stream purposes. Kept in one place so call sites cannot collide.
#[derive(Debug, Clone, Copy)]
pub enum StreamId {
    /// Global model initialization.
    Init,
    /// Per-round client selection.
    Sampling,
    /// Minibatch stream for the shared (downloaded) model.
    Shared,
    /// Minibatch stream for the client's private model.
    Private,
}

impl StreamId {
    fn tag(self) -> u64 {
        match self {
            StreamId::Init => 0x01,
            StreamId::Sampling => 0x02,
            StreamId::Shared => 0x03,
            StreamId::Private => 0x04,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn mix(state: u64, value: u64) -> u64 {
    splitmix64(state ^ splitmix64(value))
}

/// RNG for a purpose scoped to the whole run.
pub fn run_stream(seed: u64, id: StreamId) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, id.tag()))
}

/// RNG for a purpose scoped to one round.
pub fn round_stream(seed: u64, id: StreamId, round: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed, id.tag()), round as u64))
}

/// RNG for a purpose scoped to one client within one round.
pub fn client_stream(seed: u64, id: StreamId, round: usize, client: usize) -> ChaCha8Rng {
    let s = mix(mix(mix(seed, id.tag()), round as u64), client as u64);
    ChaCha8Rng::seed_from_u64(s)
}
