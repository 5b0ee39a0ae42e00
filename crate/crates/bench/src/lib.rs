//! Shared fixtures for the criterion benchmarks.

use splitquant_core::harness::{gen_bench_model, OutlierSpec};
use splitquant_core::{ModelGraph, TensorTable};

/// Weight values drawn from the default bulk-plus-outliers distribution.
pub fn weights(n: usize, seed: u64) -> Vec<f32> {
    OutlierSpec::default()
        .sample(n, &mut splitquant_core::harness::rng(seed))
        .expect("default distribution is valid")
}

/// A stack of square linear layers with about `params` parameters.
pub fn model(params: usize, width: usize) -> (ModelGraph, TensorTable) {
    gen_bench_model(params, width, 0).expect("valid bench model")
}
