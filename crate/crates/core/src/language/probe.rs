use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{accuracy, Shard};
use crate::error::{Error, Result};
use crate::harness::seeds::stream;
use crate::numcore::{Activation, Mlp, Optimizer, OptimizerKind, Tensor};

/// Softmax linear classifier on frozen features.
#[derive(Clone, Debug)]
pub struct Probe {
    pub model: Mlp<f32>,
    opt: Optimizer<f32>,
    rng: ChaCha8Rng,
}

impl Probe {
    pub fn new<R: Rng + ?Sized>(features: usize, classes: usize, opt: OptimizerKind, rng: &mut R) -> Result<Self> {
        Ok(Probe {
            model: Mlp::new(&[features, classes], Activation::Relu, Activation::Identity, 0.0, rng)?,
            opt: Optimizer::new(opt),
            // a linear model never draws dropout masks
            rng: stream(0, "probe/unused"),
        })
    }

    /// One update on a batch of features; the features carry no gradient back anywhere.
    pub fn step(&mut self, features: &Tensor<f32>, labels: &[usize]) -> Result<f32> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!("{} feature rows for {} labels", features.rows(), labels.len())));
        }
        self.model.train_labels(&mut self.opt, features, labels, &mut self.rng)
    }

    pub fn accuracy(&self, features: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        if features.rows() != labels.len() {
            return Err(Error::shape(format!("{} feature rows for {} labels", features.rows(), labels.len())));
        }
        Ok(accuracy(&self.model.predict(features)?, labels))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub batch_size: usize,
    pub max_epochs: u64,
    /// Epochs without a better validation accuracy before stopping.
    pub patience: u64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            batch_size: 32,
            max_epochs: 100,
            patience: 5,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeResult {
    pub best_valid_acc: f64,
    pub epochs: u64,
    /// Classifier from the best epoch.
    pub probe: Probe,
}

/// Fits a probe on fixed features with early stopping on validation accuracy.
pub fn linear_probe(
    train: (&Tensor<f32>, &[usize]),
    valid: (&Tensor<f32>, &[usize]),
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let (xt, yt) = train;
    let (xv, yv) = valid;
    if xt.rows() != yt.len() || xv.rows() != yv.len() {
        return Err(Error::shape("feature and label counts differ"));
    }
    if xt.rows() == 0 || xv.rows() == 0 || xt.cols() != xv.cols() {
        return Err(Error::shape("probe needs non-empty feature sets of one width"));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 || cfg.patience == 0 {
        return Err(Error::invalid("probe batch size, epochs and patience must be positive"));
    }
    let mut rng = stream(cfg.seed, "probe/init");
    let mut probe = Probe::new(xt.cols(), classes, cfg.optimizer, &mut rng)?;
    let mut data_rng = stream(cfg.seed, "probe/data");
    let mut shard = Shard::new(0, (0..xt.rows()).collect());
    let per_epoch = xt.rows().div_ceil(cfg.batch_size);
    let mut best = (f64::NEG_INFINITY, probe.clone());
    let mut since = 0;
    let mut epochs = 0;
    for _ in 0..cfg.max_epochs {
        epochs += 1;
        for _ in 0..per_epoch {
            let idx = shard.next_batch(cfg.batch_size, &mut data_rng);
            let y: Vec<usize> = idx.iter().map(|&i| yt[i]).collect();
            probe.step(&xt.select_rows(&idx), &y)?;
        }
        let acc = probe.accuracy(xv, yv)?;
        if acc > best.0 {
            best = (acc, probe.clone());
            since = 0;
        } else {
            since += 1;
            if since >= cfg.patience {
                break;
            }
        }
    }
    Ok(ProbeResult {
        best_valid_acc: best.0,
        epochs,
        probe: best.1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::one_hot;
    use rand::SeedableRng;

    #[test]
    fn separable_features_are_learned() {
        let labels: Vec<usize> = (0..400).map(|i| i % 10).collect();
        let f = one_hot(&labels, 10);
        let cfg = ProbeConfig {
            optimizer: OptimizerKind::adam_with_lr(1e-2),
            ..ProbeConfig::default()
        };
        let r = linear_probe((&f, &labels), (&f, &labels), 10, &cfg).unwrap();
        assert_eq!(r.best_valid_acc, 1.0);
    }

    #[test]
    fn random_features_sit_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |n: usize, rng: &mut ChaCha8Rng| {
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
            let x = Tensor::matrix(n, 16, (0..n * 16).map(|_| rng.random::<f32>()).collect()).unwrap();
            (x, y)
        };
        let (xt, yt) = mk(2000, &mut rng);
        let (xv, yv) = mk(5000, &mut rng);
        let cfg = ProbeConfig {
            max_epochs: 5,
            ..ProbeConfig::default()
        };
        let r = linear_probe((&xt, &yt), (&xv, &yv), 10, &cfg).unwrap();
        // the best of several epochs is slightly optimistic
        assert!((r.best_valid_acc - 0.10).abs() <= 0.02, "{}", r.best_valid_acc);
    }

    #[test]
    fn mismatched_inputs_fail() {
        let f = one_hot(&[0, 1], 2);
        assert!(linear_probe((&f, &[0]), (&f, &[0, 1]), 2, &ProbeConfig::default()).is_err());
        let mut p = Probe::new(2, 2, OptimizerKind::adam(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(p.step(&f, &[1]).is_err());
    }
}
