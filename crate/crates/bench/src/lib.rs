//! Seeded fixtures shared by the benchmarks.

use ndarray::Array2;
use otgmm_core::EmpiricalMeasure;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Uniform random cost on `[0, 1]` with uniform weights.
pub fn dense_problem(n: usize, seed: u64) -> (Array2<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = Array2::from_shape_fn((n, n), |_| rng.random::<f64>());
    let w = vec![1.0 / n as f64; n];
    (c, w.clone(), w)
}

/// Control and treated samples of a Gaussian trial with unit variance.
pub fn rct(n: usize, shift: f64, seed: u64) -> (EmpiricalMeasure, EmpiricalMeasure) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let y0 = (0..n).map(|_| vec![z.sample(&mut rng)]).collect();
    let y1 = (0..n).map(|_| vec![shift + z.sample(&mut rng)]).collect();
    (
        EmpiricalMeasure::uniform(y0).expect("finite sample"),
        EmpiricalMeasure::uniform(y1).expect("finite sample"),
    )
}
