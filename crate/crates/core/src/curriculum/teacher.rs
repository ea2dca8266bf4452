use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{accuracy, Dataset, Shard};
use crate::error::{Error, Result};
use crate::harness::metrics::{MetricsTable, Summary};
use crate::harness::seeds::stream;
use crate::numcore::{softmax_with_temperature, Activation, Mlp, Optimizer, OptimizerKind, Tensor};

const CHUNK: usize = 2048;

/// Eval-mode softmax outputs of `model` for every row of `x`, computed in row chunks.
pub fn predict_probs(model: &Mlp<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let chunks: Vec<Vec<usize>> = (0..x.rows())
        .collect::<Vec<_>>()
        .chunks(CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = chunks
        .par_iter()
        .map(|idx| softmax_with_temperature(&model.predict(&x.select_rows(idx))?, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let cols = model.out_dim();
    let data: Vec<f32> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::matrix(x.rows(), cols, data)
}

pub fn dataset_accuracy(model: &Mlp<f32>, ds: &Dataset) -> Result<f64> {
    Ok(accuracy(&predict_probs(model, ds.inputs())?, ds.labels()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub batch_size: usize,
    /// Epochs without a better validation accuracy before stopping.
    pub patience: u64,
    pub max_epochs: u64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            hidden: vec![1200, 1200],
            dropout: 0.5,
            batch_size: 32,
            patience: 3,
            max_epochs: 15,
            optimizer: OptimizerKind::adam(),
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden", "needs at least one non-empty hidden layer"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs", "must be at least 1"));
        }
        Ok(())
    }

    pub fn build(&self, dim: usize, classes: usize) -> Result<Mlp<f32>> {
        let mut dims = vec![dim];
        dims.extend(&self.hidden);
        dims.push(classes);
        Mlp::new(&dims, Activation::Relu, Activation::Identity, self.dropout, &mut stream(self.seed, "teacher/init"))
    }
}

#[derive(Debug)]
pub struct TeacherRun {
    /// Parameters from the epoch with the best validation accuracy.
    pub model: Mlp<f32>,
    pub metrics: MetricsTable,
    pub summary: Summary,
    pub best_valid_acc: f64,
}

/// Trains the teacher with early stopping on validation accuracy, checked once per epoch.
pub fn train_teacher(cfg: &TeacherConfig, train: &Dataset, valid: &Dataset) -> Result<TeacherRun> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::data("teacher needs non-empty training and validation sets"));
    }
    let mut model = cfg.build(train.dim(), train.classes())?;
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut data_rng = stream(cfg.seed, "teacher/data");
    let mut drop_rng = stream(cfg.seed, "teacher/dropout");
    let mut shard = Shard::new(0, (0..train.len()).collect());
    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut metrics = MetricsTable::new(
        format!("teacher-{}-s{}", hidden_tag(&cfg.hidden), cfg.seed),
        "epoch",
        vec!["train_loss".into(), "valid_acc".into()],
    );
    let start = Instant::now();
    let mut best: Option<(f64, Mlp<f32>)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for _ in 0..per_epoch {
            let idx = shard.next_batch(cfg.batch_size, &mut data_rng);
            let (x, y) = train.batch(&idx);
            loss_sum += model.train_labels(&mut opt, &x, &y, &mut drop_rng)? as f64;
        }
        let acc = dataset_accuracy(&model, valid)?;
        metrics.push(epoch, vec![loss_sum / per_epoch as f64, acc], start.elapsed().as_secs_f64())?;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_valid_acc, model) = best.expect("at least one epoch");
    let summary = Summary::peak_of(&metrics, "valid_acc");
    Ok(TeacherRun {
        model,
        metrics,
        summary,
        best_valid_acc,
    })
}

fn hidden_tag(h: &[usize]) -> String {
    h.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// A fixed teacher with its predictions on the training rows cached.
///
/// The teacher never changes during a student run, so every push reads the
/// cache instead of running the large network again.
#[derive(Clone, Debug)]
pub struct Teacher {
    probs: Tensor<f32>,
}

impl Teacher {
    pub fn from_model(model: &Mlp<f32>, train: &Dataset) -> Result<Self> {
        if model.in_dim() != train.dim() || model.out_dim() != train.classes() {
            return Err(Error::shape("teacher does not fit the dataset"));
        }
        Ok(Teacher {
            probs: predict_probs(model, train.inputs())?,
        })
    }

    pub fn from_probs(probs: Tensor<f32>) -> Self {
        Teacher { probs }
    }

    pub fn rows(&self) -> usize {
        self.probs.rows()
    }

    pub fn probs(&self) -> &Tensor<f32> {
        &self.probs
    }

    /// Teacher distributions for training rows `idx`.
    pub fn probs_for(&self, idx: &[usize]) -> Tensor<f32> {
        self.probs.select_rows(idx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::make_synthetic;

    #[test]
    fn teacher_learns_and_caches() {
        let ds = make_synthetic(600, 8, 3, 5).unwrap();
        let (train, valid) = crate::dataio::split_train_valid(&ds, 150, 0).unwrap();
        let cfg = TeacherConfig {
            hidden: vec![32],
            max_epochs: 8,
            patience: 3,
            ..TeacherConfig::default()
        };
        let run = train_teacher(&cfg, &train, &valid).unwrap();
        assert!(run.best_valid_acc > 0.9, "{}", run.best_valid_acc);
        assert_eq!(dataset_accuracy(&run.model, &valid).unwrap(), run.best_valid_acc);
        let t = Teacher::from_model(&run.model, &train).unwrap();
        assert_eq!(t.rows(), train.len());
        let direct = softmax_with_temperature(&run.model.predict(&train.batch(&[3, 7]).0).unwrap(), 1.0).unwrap();
        assert_eq!(t.probs_for(&[3, 7]), direct);
        assert!(Teacher::from_model(&run.model, &make_synthetic(10, 4, 3, 0).unwrap()).is_err());
    }

    #[test]
    fn chunked_prediction_matches_whole() {
        let ds = make_synthetic(CHUNK + 37, 5, 4, 1).unwrap();
        let m = TeacherConfig {
            hidden: vec![6],
            ..TeacherConfig::default()
        }
        .build(5, 4)
        .unwrap();
        let whole = softmax_with_temperature(&m.predict(ds.inputs()).unwrap(), 1.0).unwrap();
        assert_eq!(predict_probs(&m, ds.inputs()).unwrap(), whole);
    }

    #[test]
    fn config_rejects_bad_values() {
        let bad = TeacherConfig {
            dropout: 1.0,
            ..TeacherConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { ref key, .. }) if key == "dropout"));
    }
}
