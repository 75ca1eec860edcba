//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the run seed. Independent
//! purposes (data generation, parameter init, clustering, ...) get distinct
//! ChaCha stream ids, so re-seeding or consuming one never perturbs another.
//! Per-item sub-streams (one per sample, one per batch) fold an index into
//! the low 48 bits of the stream id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type StreamRng = ChaCha8Rng;

/// Purpose of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Routing = 3,
    Cluster = 4,
    Batching = 5,
    Frozen = 6,
}

/// Root seed from which all purpose streams are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub seed: u64,
}

impl Seeds {
    pub fn new(seed: u64) -> Self {
        Seeds { seed }
    }

    pub fn stream(&self, purpose: Stream) -> StreamRng {
        self.substream(purpose, 0)
    }

    /// Stream `index` of `purpose`. Only the low 48 bits of `index` are used.
    pub fn substream(&self, purpose: Stream, index: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((purpose as u64) << 48) | (index & 0xFFFF_FFFF_FFFF));
        rng
    }
}
