//! Tape-free versions of the losses and normalizations.

use rand::Rng;

use crate::error::{Error, Result};

use super::tape::softmax_in_place;
use super::{Scalar, Tensor};

/// Added inside every logarithm so hardened targets never hit `ln 0`.
pub const LOG_EPS: f64 = 1e-12;

/// Row-wise softmax of `logits / tau`.
pub fn softmax_with_temperature<T: Scalar>(logits: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
    if !(tau > T::zero()) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    logits.ensure_finite("softmax logits")?;
    let (r, c) = (logits.rows(), logits.cols());
    let mut out = logits.data().to_vec();
    let inv = T::one() / tau;
    if c > 0 {
        for row in out.chunks_mut(c) {
            softmax_in_place(row, inv);
        }
    }
    Tensor::matrix(r, c, out)
}

/// Mean over rows of `-Σ_j target_j · ln(pred_j + 1e-12)`.
pub fn cross_entropy_full<T: Scalar>(target: &Tensor<T>, pred: &Tensor<T>) -> Result<T> {
    check_same(target, pred, "cross_entropy_full")?;
    let eps = T::from_f64_lossy(LOG_EPS);
    let total: T = target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&t, &p)| -t * (p + eps).ln())
        .sum();
    Ok(total / T::from_usize(target.rows().max(1)).unwrap())
}

/// Mean over rows of `Σ_k ½ (a_k - b_k)²`.
pub fn mse_features<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    check_same(a, b, "mse_features")?;
    let half = T::from_f64_lossy(0.5);
    let total: T = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| half * (x - y) * (x - y))
        .sum();
    Ok(total / T::from_usize(a.rows().max(1)).unwrap())
}

/// Bernoulli keep mask (1 = kept, 0 = dropped).
///
/// Callers scale kept units by `1 / (1 - drop_p)`.
pub fn dropout_mask<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    drop_p: f64,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::invalid(format!("dropout probability {drop_p} outside [0, 1)")));
    }
    let data = (0..rows * cols)
        .map(|_| {
            if drop_p == 0.0 || rng.random::<f64>() >= drop_p {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::matrix(rows, cols, data)
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}
