//! Counter-based random streams.
//!
//! Every consumer of randomness derives its generator from a `(seed, stream)`
//! pair, so the draws for a given training step or sample index never depend
//! on how work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Domain tags keep streams for different purposes disjoint.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Domain {
    Train = 1,
    Init = 2,
    AnchorNoise = 3,
    PartnerNoise = 4,
    Synthetic = 5,
    Split = 6,
    Surface = 7,
    Metric = 8,
    Regularizer = 9,
    Backbone = 10,
}

pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((domain as u64) << 56));
    rng.set_stream(index);
    rng
}

pub fn gaussian_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn gaussian<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}
