//! Deterministic random streams. Every stochastic component draws from a
//! ChaCha stream derived from (seed, purpose) so that runs replay exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stable stream ids; separating purposes keeps consumers independent of
/// each other's draw counts.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    Init(u64),
    Batching,
    Augment,
    PosteriorNoise,
    PriorSample,
    Phantom(u64),
    Other(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init(k) => 0x1000 + k,
            Stream::Batching => 0x2000,
            Stream::Augment => 0x3000,
            Stream::PosteriorNoise => 0x4000,
            Stream::PriorSample => 0x5000,
            Stream::Phantom(k) => 0x6000 + k,
            Stream::Other(k) => 0x7000 + k,
        }
    }
}

pub fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s.id());
    rng
}

/// Standard normal draw.
pub fn normal(rng: &mut impl Rng) -> f32 {
    StandardNormal.sample(rng)
}

/// Gaussian truncated at two standard deviations, by resampling.
pub fn truncated_normal(rng: &mut impl Rng, std: f32) -> f32 {
    loop {
        let v: f32 = StandardNormal.sample(rng);
        if v.abs() <= 2.0 {
            return v * std;
        }
    }
}
