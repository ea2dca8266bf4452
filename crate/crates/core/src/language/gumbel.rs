use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tape, Tensor, Var};

/// Gumbel-softmax temperature `max(tau_min, tau0 * factor^floor(step / every))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealSchedule {
    pub tau0: f64,
    pub factor: f64,
    pub every: u64,
    pub tau_min: f64,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule {
            tau0: 4.0,
            factor: 0.9,
            every: 100,
            tau_min: 0.5,
        }
    }
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_min > 0.0) || !(self.tau0 >= self.tau_min) || !self.tau0.is_finite() {
            return Err(Error::config("anneal", "needs 0 < tau_min <= tau0"));
        }
        if !(self.factor > 0.0 && self.factor <= 1.0) {
            return Err(Error::config("anneal", "factor must lie in (0, 1]"));
        }
        if self.every == 0 {
            return Err(Error::config("anneal", "every must be at least 1"));
        }
        Ok(())
    }

    pub fn anneal(&self, step: u64) -> f64 {
        let k = (step / self.every).min(i32::MAX as u64) as i32;
        (self.tau0 * self.factor.powi(k)).max(self.tau_min)
    }
}

/// Standard Gumbel draws `-ln(-ln u)` with `u` strictly inside (0, 1).
pub fn gumbel_noise<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            T::from_f64_lossy(-(-u.ln()).ln())
        })
        .collect()
}

/// Relaxed one-hot samples: softmax over each group of `vocab` columns of `(scores + g) / tau`.
pub fn gumbel_softmax_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    scores: Var,
    vocab: usize,
    tau: T,
    noise: &[T],
) -> Result<Var> {
    if !(tau > T::zero()) {
        return Err(Error::invalid("Gumbel-softmax temperature must be positive"));
    }
    let perturbed = tape.add_const(scores, noise)?;
    tape.softmax_groups(perturbed, vocab, tau)
}

/// A batch of messages of `length` tokens over `vocab` symbols.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    /// (batch, length * vocab); every group of `vocab` columns is a distribution.
    pub soft: Tensor<f32>,
    /// (batch * length) token indices, the argmax of each soft group.
    pub hard: Vec<usize>,
    pub length: usize,
    pub vocab: usize,
}

impl Message {
    pub fn from_soft(soft: Tensor<f32>, vocab: usize) -> Result<Self> {
        if vocab == 0 || !soft.cols().is_multiple_of(vocab) {
            return Err(Error::shape(format!("{} columns do not split into groups of {vocab}", soft.cols())));
        }
        let hard = soft.data().chunks(vocab).map(crate::numcore::argmax).collect();
        Ok(Message {
            length: soft.cols() / vocab,
            soft,
            hard,
            vocab,
        })
    }

    /// One-hot rows of the hard message, shaped like `soft`.
    pub fn hard_one_hot(&self) -> Tensor<f32> {
        let mut data = vec![0.0; self.soft.numel()];
        for (g, &k) in self.hard.iter().enumerate() {
            data[g * self.vocab + k] = 1.0;
        }
        Tensor::matrix(self.soft.rows(), self.soft.cols(), data).expect("message shape")
    }
}

/// Samples relaxed messages for scores of shape (batch, length * vocab).
pub fn gumbel_softmax_sample<R: Rng + ?Sized>(scores: &Tensor<f32>, vocab: usize, tau: f32, rng: &mut R) -> Result<Message> {
    let noise = gumbel_noise(scores.numel(), rng);
    let mut tape = Tape::new();
    let s = tape.input(scores);
    let soft = gumbel_softmax_on_tape(&mut tape, s, vocab, tau, &noise)?;
    Message::from_soft(tape.value(soft), vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn anneal_values() {
        let a = AnnealSchedule::default();
        assert_eq!(a.anneal(0), 4.0);
        assert_eq!(a.anneal(99), 4.0);
        assert_abs_diff_eq!(a.anneal(100), 3.6, epsilon = 1e-12);
        assert_abs_diff_eq!(a.anneal(250), 4.0 * 0.81, epsilon = 1e-12);
        assert_eq!(a.anneal(1_000_000), 0.5);
        assert_eq!(a.anneal(u64::MAX), 0.5);
        let mut prev = f64::INFINITY;
        for step in (0..5000).step_by(7) {
            let t = a.anneal(step);
            assert!(t <= prev && (0.5..=4.0).contains(&t));
            prev = t;
        }
    }

    #[test]
    fn rows_are_distributions_and_hard_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let scores = Tensor::matrix(3, 8, (0..24).map(|i| (i as f32 * 0.37).sin() * 3.0).collect()).unwrap();
        for tau in [4.0, 1.0, 0.5, 0.01] {
            let m = gumbel_softmax_sample(&scores, 2, tau, &mut rng).unwrap();
            assert_eq!((m.length, m.hard.len()), (4, 12));
            for (g, pair) in m.soft.data().chunks(2).enumerate() {
                assert_abs_diff_eq!(pair.iter().sum::<f32>(), 1.0, epsilon = 1e-6);
                assert_eq!(m.hard[g], crate::numcore::argmax(pair));
            }
            let oh = m.hard_one_hot();
            assert_eq!(oh.data().iter().sum::<f32>(), 12.0);
        }
        assert!(gumbel_softmax_sample(&scores, 2, 0.0, &mut rng).is_err());
        assert!(gumbel_softmax_sample(&scores, 3, 1.0, &mut rng).is_err());
    }

    #[test]
    fn low_temperature_hardens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let scores = Tensor::matrix(10_000, 2, [2.0f32, -1.0].repeat(10_000)).unwrap();
        let m = gumbel_softmax_sample(&scores, 2, 0.01, &mut rng).unwrap();
        let sharp = m.soft.iter_rows().filter(|r| r[0].max(r[1]) > 0.99).count();
        assert!(sharp as f64 >= 0.99 * 10_000.0, "{sharp}");
    }
}
