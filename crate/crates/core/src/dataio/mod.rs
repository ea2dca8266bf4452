//! Datasets, splits, per-node shards, partial-observation masks and a synthetic fixture.

mod idx;
mod mask;
mod shard;
mod synthetic;

pub use idx::{load_mnist, load_mnist_dir, mnist_paths, parse_mnist, read_maybe_gz, IdxHeader, MnistSplit, IMAGES_MAGIC, LABELS_MAGIC};
pub use mask::{apply_mask, apply_mask_rows, sample_mask, NoiseMask};
pub use shard::{partition, Shard};
pub use synthetic::make_synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Inputs in `[0, 1]` with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor<f32>,
    labels: Vec<usize>,
    classes: usize,
    name: String,
}

impl Dataset {
    pub fn new(inputs: Tensor<f32>, labels: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::data(format!(
                "{} input rows but {} labels",
                inputs.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!("label {bad} outside {classes} classes")));
        }
        if !inputs.data().iter().all(|x| (0.0..=1.0).contains(x)) {
            return Err(Error::data("inputs must lie in [0, 1]"));
        }
        Ok(Dataset {
            inputs,
            labels,
            classes,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn inputs(&self) -> &Tensor<f32> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows at `indices` with their labels, in the given order.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        let (inputs, labels) = self.batch(indices);
        Dataset {
            inputs,
            labels,
            classes: self.classes,
            name: name.into(),
        }
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, self.name.clone())
    }
}

/// One-hot encodes labels as a (N, classes) matrix.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor<f32> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::matrix(labels.len(), classes, data).expect("one-hot shape")
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(outputs: &Tensor<f32>, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = outputs
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(a, b)| a == b)
        .count();
    hits as f64 / labels.len() as f64
}

/// Holds out `n_valid` rows chosen by a seeded permutation.
///
/// Both parts keep the original row order.
pub fn split_train_valid(ds: &Dataset, n_valid: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_valid >= ds.len() && n_valid > 0 {
        return Err(Error::invalid(format!(
            "cannot hold out {n_valid} of {} rows",
            ds.len()
        )));
    }
    let (train_idx, valid_idx) = split_indices(ds.len(), n_valid, seed);
    Ok((
        ds.subset(&train_idx, format!("{}-train", ds.name)),
        ds.subset(&valid_idx, format!("{}-valid", ds.name)),
    ))
}

pub(crate) fn split_indices(n: usize, n_valid: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut valid = perm[..n_valid].to_vec();
    let mut train = perm[n_valid..].to_vec();
    valid.sort_unstable();
    train.sort_unstable();
    (train, valid)
}
