//! Named, indexable random substreams derived from one master seed.
//!
//! Every consumer (simulation frames, base-line RANSAC, calibration RANSAC)
//! derives its own stream, so work can be split across threads without the
//! output depending on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Calibration,
    Trajectory,
    Render,
    TrackingNoise,
    BaseLine,
    Ransac,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Calibration => 0x43_414c,
            Stream::Trajectory => 0x54_524a,
            Stream::Render => 0x52_4e44,
            Stream::TrackingNoise => 0x54_4e5a,
            Stream::BaseLine => 0x42_534c,
            Stream::Ransac => 0x52_5343,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic RNG for `(seed, stream, index)`.
pub fn substream(seed: u64, stream: Stream, index: u64) -> StreamRng {
    let s = splitmix64(seed ^ splitmix64(stream.tag() ^ splitmix64(index)));
    ChaCha8Rng::seed_from_u64(s)
}
