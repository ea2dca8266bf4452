use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

use super::Dataset;

/// Gaussian blobs around per-class centroids, clipped to `[0, 1]`.
///
/// Row `i` has label `i % classes`, so class counts differ by at most one.
pub fn make_synthetic(n: usize, d: usize, classes: usize, seed: u64) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::invalid(format!("need n >= classes >= 1, got n={n}, classes={classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..d).map(|_| rng.random_range(0.15f32..0.85)).collect())
        .collect();
    let noise = Normal::new(0.0f32, 0.05).unwrap();
    let mut data = Vec::with_capacity(n * d);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &l in &labels {
        for &c in &centroids[l] {
            data.push((c + noise.sample(&mut rng)).clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::matrix(n, d, data)?, labels, classes, format!("synthetic-{seed}"))
}
