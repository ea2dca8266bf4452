use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Fixed per-agent set of inverted input positions.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseMask {
    pub bits: Vec<bool>,
    pub noise_level: f64,
}

impl NoiseMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// One independent Bernoulli(noise_level) bit per input position.
pub fn sample_mask<R: Rng + ?Sized>(d: usize, noise_level: f64, rng: &mut R) -> Result<NoiseMask> {
    if !(0.0..=1.0).contains(&noise_level) {
        return Err(Error::invalid(format!("noise level {noise_level} outside [0, 1]")));
    }
    let bits = (0..d).map(|_| rng.random_bool(noise_level)).collect();
    Ok(NoiseMask {
        bits,
        noise_level,
    })
}

/// `1 - x` where the mask bit is set, `x` elsewhere.
pub fn apply_mask(x: &[f32], mask: &NoiseMask) -> Result<Vec<f32>> {
    if x.len() != mask.len() {
        return Err(Error::shape(format!(
            "input of length {} with mask of length {}",
            x.len(),
            mask.len()
        )));
    }
    Ok(x.iter()
        .zip(&mask.bits)
        .map(|(&v, &b)| if b { 1.0 - v } else { v })
        .collect())
}

/// Applies the mask to every row of a batch.
pub fn apply_mask_rows(x: &Tensor<f32>, mask: &NoiseMask) -> Result<Tensor<f32>> {
    if x.cols() != mask.len() {
        return Err(Error::shape(format!(
            "rows of length {} with mask of length {}",
            x.cols(),
            mask.len()
        )));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(mask.len().max(1)) {
        for (v, &b) in row.iter_mut().zip(&mask.bits) {
            if b {
                *v = 1.0 - *v;
            }
        }
    }
    Tensor::matrix(x.rows(), x.cols(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn extreme_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask(50, 0.0, &mut rng).unwrap().ones(), 0);
        assert_eq!(sample_mask(50, 1.0, &mut rng).unwrap().ones(), 50);
        assert!(sample_mask(5, 1.5, &mut rng).is_err());
    }

    #[test]
    fn ten_percent_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let total: usize = (0..100).map(|_| sample_mask(784, 0.1, &mut rng).unwrap().ones()).sum();
        let frac = total as f64 / (100.0 * 784.0);
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
    }

    #[test]
    fn apply_cases() {
        let zero = NoiseMask { bits: vec![false; 3], noise_level: 0.0 };
        assert_eq!(apply_mask(&[0.1, 0.5, 0.9], &zero).unwrap(), vec![0.1, 0.5, 0.9]);
        let ones = NoiseMask { bits: vec![true; 3], noise_level: 1.0 };
        assert_eq!(apply_mask(&[0.25; 3], &ones).unwrap(), vec![0.75; 3]);
        assert!(apply_mask(&[0.0; 2], &ones).is_err());
        let batch = Tensor::matrix(2, 3, vec![0.25; 6]).unwrap();
        assert_eq!(apply_mask_rows(&batch, &ones).unwrap().data(), &[0.75; 6]);
    }

    proptest! {
        #[test]
        fn mask_is_an_involution_within_range(
            x in prop::collection::vec(0f32..=1.0, 1..64),
            seed in any::<u64>(),
        ) {
            let m = sample_mask(x.len(), 0.3, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let once = apply_mask(&x, &m).unwrap();
            prop_assert!(once.iter().all(|v| (0.0..=1.0).contains(v)));
            // 1 - (1 - x) can differ from x by one rounding step
            for (a, b) in apply_mask(&once, &m).unwrap().iter().zip(&x) {
                prop_assert!((a - b).abs() <= f32::EPSILON);
            }
        }
    }
}
