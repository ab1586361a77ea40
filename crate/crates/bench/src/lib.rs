//! Shared fixtures for the benchmarks.

use stochdet_core::model::fixture_arch;
use stochdet_core::{Model, Tensor};

/// Untrained fixture-architecture model; timing does not depend on the weights.
pub fn model() -> Model {
    Model::init([1, 18, 18], fixture_arch(18, 4).expect("fixture arch"), 3).expect("init")
}

pub fn input() -> Tensor {
    Tensor::new(vec![1, 18, 18], (0..324).map(|i| (i % 17) as f64 / 17.0).collect()).expect("shape")
}
