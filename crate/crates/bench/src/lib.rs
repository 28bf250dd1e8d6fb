//! Fixtures shared by the kernel benchmarks.

use bnml_core::dataset::{gen_example1, gen_gaussian_experiment, Example1Config};
use bnml_core::linalg::SymMat;
use bnml_core::trainer::init_state;
use bnml_core::{Dataset, ModelState, Rng, TestSampler, TrainConfig};

/// Centered Gaussian data at the equalization-experiment scale (`n = 50`, `d = 1000`).
pub fn gaussian_data(n: usize, d: usize) -> Dataset {
    gen_gaussian_experiment(&mut Rng::new(1), n, d).expect("valid shape")
}

/// A default initialization for `data`.
pub fn initial_state(data: &Dataset) -> ModelState {
    init_state(&mut Rng::new(2), &TrainConfig::default(), data.d())
}

/// Example-1 training set and sampler at the regime scale.
pub fn example1(n: usize, patches: usize) -> (Dataset, TestSampler) {
    gen_example1(&mut Rng::new(3), &Example1Config::regime_scale(n, patches)).expect("valid config")
}

/// Random symmetric `dim × dim` Gram matrix.
pub fn gram(dim: usize) -> SymMat {
    let mut rng = Rng::new(4);
    let rows: Vec<Vec<f64>> = (0..dim).map(|_| rng.normal_vec(2 * dim)).collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    SymMat::gram(&refs, 1.0)
}
