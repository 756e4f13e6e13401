//! Seeded, portable random streams.
//!
//! Every random decision in the crate draws from a ChaCha8 generator seeded
//! with `seed_from_u64(seed)` and then moved onto a stream selected by
//! [`Stream`]. The 64-bit stream id packs a 16-bit domain tag, a 24-bit round
//! and a 24-bit index:
//!
//! ```text
//! stream = domain << 48 | round << 24 | index
//! ```
//!
//! For within-cluster sampling `round` is the selection round (0 for static
//! samplers, `it - 1` for iteration `it` of the iterative engine) and `index`
//! is the cluster index, so each cluster's draws depend only on
//! `(seed, round, cluster)` and never on the order clusters are visited.
//!
//! Uniform variates are built from the raw 64-bit output (top 53 bits), which
//! keeps their values identical on every platform.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default seed, matching the usual k-means seed of 42.
pub const DEFAULT_SEED: u64 = 42;

const INDEX_BITS: u32 = 24;
const INDEX_MASK: u64 = (1 << INDEX_BITS) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// k-means++ seeding for one restart.
    KMeansInit { restart: u32 },
    /// First-center draw of the greedy k-center traversal.
    KCenter,
    /// Within-cluster draws of a budgeted sampler.
    ClusterSample { round: u32, cluster: u32 },
    /// Corpus-wide uniform sampling.
    Uniform,
    /// Subsampling of points scored by the silhouette.
    Silhouette,
    /// Synthetic data generation.
    Synthetic { index: u32 },
    /// Noise of the mock scorer.
    MockScorer,
}

impl Stream {
    fn id(self) -> u64 {
        let (domain, round, index): (u64, u64, u64) = match self {
            Stream::KMeansInit { restart } => (1, 0, restart as u64),
            Stream::KCenter => (2, 0, 0),
            Stream::ClusterSample { round, cluster } => (3, round as u64, cluster as u64),
            Stream::Uniform => (4, 0, 0),
            Stream::Silhouette => (5, 0, 0),
            Stream::Synthetic { index } => (6, 0, index as u64),
            Stream::MockScorer => (7, 0, 0),
        };
        debug_assert!(round <= INDEX_MASK && index <= INDEX_MASK);
        (domain << 48) | ((round & INDEX_MASK) << INDEX_BITS) | (index & INDEX_MASK)
    }
}

/// A generator positioned on one stream.
#[derive(Debug, Clone)]
pub struct StreamRng {
    inner: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: Stream) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream.id());
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe to take the logarithm of.
    pub fn unit_open0(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection (no modulo bias).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Access for `rand_distr` distributions.
    pub fn as_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.inner
    }
}
