#![allow(dead_code)]

use bnml_core::{Dataset, Rng};
use proptest::prelude::*;

/// Uncentered Gaussian patches with Rademacher labels.
pub fn gaussian(seed: u64, n: usize, patches: usize, d: usize) -> Dataset {
    let mut rng = Rng::new(seed);
    let samples = (0..n).map(|_| (0..patches).map(|_| rng.normal_vec(d)).collect()).collect();
    let labels = (0..n).map(|_| rng.rademacher()).collect();
    Dataset::from_patches(samples, labels).unwrap()
}

/// `(seed, n, P, d)` with `n <= 30`, `P <= 5`, `d >= nP`, `d <= 60`.
pub fn shapes() -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 1usize..=5).prop_flat_map(|(seed, p)| {
        (Just(seed), 1usize..=(60 / p).min(30), Just(p)).prop_flat_map(|(seed, n, p)| {
            (Just(seed), Just(n), Just(p), (n * p)..=60)
        })
    })
}

pub fn rel(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 { 0.0 } else { (a - b).abs() / s }
}
