//! Synthetic Gaussian and Poisson corruption.
//!
//! Element `i` of the output is drawn from [`rng::stream`]`(seed, i)`, so the
//! result is a pure function of `(clean, spec)` and is computed in parallel.

use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    /// Additive zero-mean Gaussian; `std` is in image-value units.
    Gaussian { std: f32 },
    /// `x = Poisson(lambda * s) / lambda`, which has mean `s` and variance `s / lambda`.
    Poisson { lambda: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn apply(&self, clean: &Tensor) -> Result<Tensor> {
        match self.kind {
            NoiseKind::Gaussian { std } => add_gaussian(clean, std, self.seed),
            NoiseKind::Poisson { lambda } => add_poisson(clean, lambda, self.seed),
        }
    }
}

pub fn add_gaussian(clean: &Tensor, std: f32, seed: u64) -> Result<Tensor> {
    if !(std >= 0.0) {
        return Err(Error::NegativeStd(std));
    }
    if std == 0.0 {
        return Ok(clean.clone());
    }
    let normal = Normal::new(0.0f64, std as f64).map_err(|_| Error::NegativeStd(std))?;
    let data = clean
        .data()
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let mut r = rng::stream(seed, i as u64);
            (s as f64 + normal.sample(&mut r)) as f32
        })
        .collect();
    clean.map_data(data)
}

pub fn add_poisson(clean: &Tensor, lambda: f32, seed: u64) -> Result<Tensor> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidLambda(lambda));
    }
    if let Some(&bad) = clean.data().iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::NegativeSignal(bad));
    }
    let lambda = lambda as f64;
    let data = clean
        .data()
        .par_iter()
        .enumerate()
        .map(|(i, &s)| {
            let rate = lambda * s as f64;
            if rate == 0.0 {
                return 0.0;
            }
            let mut r = rng::stream(seed, i as u64);
            // Knuth inversion below a rate of 12, PTRS-style rejection above.
            let counts = Poisson::new(rate)
                .expect("positive finite rate")
                .sample(&mut r);
            (counts / lambda) as f32
        })
        .collect();
    clean.map_data(data)
}
