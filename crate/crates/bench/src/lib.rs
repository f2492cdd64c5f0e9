//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vpt_core::{Array, DensityEstimator, FlowConfig, PartitionMode, PriorKind};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` rows of `dims` standard-normal-ish coordinates.
pub fn batch(n: usize, dims: usize, seed: u64) -> Array {
    let mut r = rng(seed);
    let data = (0..n * dims).map(|_| r.random_range(-2.0..2.0)).collect();
    Array::matrix(n, dims, data).expect("shape is consistent")
}

pub fn estimator(dims: usize, prior: PriorKind, levels: usize, mode: PartitionMode, smooth: bool) -> DensityEstimator {
    let mut r = rng(1);
    let mut est = DensityEstimator::new(dims, prior, levels, mode, FlowConfig::default(), smooth, &mut r)
        .expect("valid estimator");
    for p in est.flow.parameters_mut().into_iter().chain(est.base.parameters_mut()) {
        p.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.3..0.3));
    }
    est
}
