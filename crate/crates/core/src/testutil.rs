//! Seeded random fixtures for unit tests.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::forward::{KSpaceData, SamplingPattern};
use crate::manifold::ManifoldGraph;
use crate::real::Real;
use crate::series::DynamicSeries;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_series<T: Real>(f: usize, h: usize, w: usize, seed: u64) -> DynamicSeries<T> {
    let mut r = rng(seed);
    DynamicSeries::from_fn(f, h, w, |_, _, _| {
        Complex::new(T::of(r.gen_range(-1.0..1.0)), T::of(r.gen_range(-1.0..1.0)))
    })
    .unwrap()
}

pub fn random_kspace<T: Real>(p: &SamplingPattern, seed: u64) -> KSpaceData<T> {
    let mut v = random_series::<T>(p.nframes(), p.height(), p.width(), seed);
    for (z, &m) in v.data_mut().iter_mut().zip(p.masks()) {
        if !m {
            *z = Complex::new(T::zero(), T::zero());
        }
    }
    KSpaceData::new(p.clone(), v).unwrap()
}

/// Symmetric graph with roughly half the edges present.
pub fn random_graph(n: usize, seed: u64) -> ManifoldGraph<f64> {
    let mut r = rng(seed);
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if r.gen_bool(0.6) {
                let v = r.gen_range(0.0..1.0);
                w[i * n + j] = v;
                w[j * n + i] = v;
            }
        }
    }
    ManifoldGraph::from_weights(n, w).unwrap()
}
