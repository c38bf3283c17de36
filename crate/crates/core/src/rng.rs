//! Seeded random number streams.
//!
//! All randomness in a run flows from a single 64-bit seed through named
//! ChaCha20 sub-streams, so individual components (population sampling,
//! supply simulation, parameter init, evaluation) can be reproduced in
//! isolation. Gaussian draws use Box-Muller on top of the stream, which pins
//! the exact sequence of values to this implementation rather than to a
//! library's sampling internals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Named consumers of randomness. Each gets an independent stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamKind {
    /// Initial agent positions drawn each training iteration.
    Population,
    /// Supply path increments drawn each training iteration.
    Supply,
    /// Network parameter initialization.
    Init,
    /// Per-epoch evaluation draws (test population and MC supply paths).
    Eval,
}

impl StreamKind {
    fn id(self) -> u64 {
        match self {
            StreamKind::Population => 1,
            StreamKind::Supply => 2,
            StreamKind::Init => 3,
            StreamKind::Eval => 4,
        }
    }
}

/// Factory for the named sub-streams of one run.
#[derive(Clone, Copy, Debug)]
pub struct RngStreams {
    seed: u64,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The stream for `kind`. Same seed and kind always yields the same stream.
    pub fn stream(&self, kind: StreamKind) -> ChaCha20Rng {
        self.indexed_stream(kind, 0)
    }

    /// An indexed sub-stream, e.g. one per Monte-Carlo sample.
    pub fn indexed_stream(&self, kind: StreamKind, index: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream((kind.id() << 32) | index);
        rng
    }
}

/// Standard normal draw via Box-Muller.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // 1 - u lies in (0, 1], keeping the log finite.
    let u1: f64 = rng.random();
    let u2: f64 = rng.random();
    let radius = (-2.0 * (1.0 - u1).ln()).sqrt();
    radius * (std::f64::consts::TAU * u2).cos()
}

/// Normal(mean, std^2) draw.
pub fn normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64) -> f64 {
    mean + std * standard_normal(rng)
}
