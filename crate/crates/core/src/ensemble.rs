//! Entropy-weighted fusion of per-node predictive distributions.
//!
//! Two weightings are offered. [`FusionMode::Literal`] gives each node a
//! weight proportional to its entropy `h`, exactly as the published
//! pseudo-code reads. [`FusionMode::Confidence`] gives weight proportional to
//! `ln C - h`, so confident nodes count more. When every weight would be zero
//! the uniform weighting is used and the result is flagged.
//!
//! All sums run over sorted terms, which makes the outputs independent of
//! node order down to the last bit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::numcore::{argmax, softmax_with_temperature, Mlp, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Literal,
    #[default]
    Confidence,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupPrediction {
    pub entropies: Vec<f64>,
    pub weights: Vec<f64>,
    pub fused: Vec<f64>,
    pub decision: usize,
    /// Set when the weight denominator vanished and uniform weights were used.
    pub fallback: bool,
}

const DIST_TOL: f64 = 1e-4;

/// Shannon entropy in nats; `0 ln 0` counts as zero.
pub fn shannon_entropy(dist: &[f64]) -> Result<f64> {
    check_distribution(dist)?;
    Ok(sorted_sum(
        dist.iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .collect(),
    ))
}

fn check_distribution(dist: &[f64]) -> Result<()> {
    if dist.is_empty() {
        return Err(Error::invalid("empty distribution"));
    }
    if dist.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid("distribution has negative or non-finite entries"));
    }
    let s: f64 = dist.iter().sum();
    if (s - 1.0).abs() > DIST_TOL {
        return Err(Error::invalid(format!("distribution sums to {s}")));
    }
    Ok(())
}

fn sorted_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.into_iter().sum()
}

pub fn collective_decision<D: AsRef<[f64]>>(per_node: &[D], mode: FusionMode) -> Result<GroupPrediction> {
    let Some(first) = per_node.first() else {
        return Err(Error::invalid("collective decision needs at least one node"));
    };
    let c = first.as_ref().len();
    if per_node.iter().any(|d| d.as_ref().len() != c) {
        return Err(Error::shape("nodes disagree on the class count"));
    }
    let entropies = per_node
        .iter()
        .map(|d| shannon_entropy(d.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let raw: Vec<f64> = match mode {
        FusionMode::Literal => entropies.clone(),
        FusionMode::Confidence => {
            let max = (c as f64).ln();
            entropies.iter().map(|h| (max - h).max(0.0)).collect()
        }
    };
    let denom = sorted_sum(raw.clone());
    let fallback = !(denom > 0.0);
    let n = per_node.len() as f64;
    let weights: Vec<f64> = if fallback {
        vec![1.0 / n; per_node.len()]
    } else {
        raw.iter().map(|r| r / denom).collect()
    };
    let fused: Vec<f64> = (0..c)
        .map(|j| {
            sorted_sum(
                per_node
                    .iter()
                    .zip(&weights)
                    .map(|(d, w)| w * d.as_ref()[j])
                    .collect(),
            )
        })
        .collect();
    let decision = argmax(&fused);
    Ok(GroupPrediction {
        entropies,
        weights,
        fused,
        decision,
        fallback,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupEval {
    pub per_node_acc: Vec<f64>,
    pub avg_acc: f64,
    pub collective_acc: f64,
    /// Samples where the uniform fallback weighting was used.
    pub fallbacks: usize,
}

/// Accuracy of each node and of the fused decision, from per-node (N, C) distribution rows.
pub fn evaluate_distributions(dists: &[Tensor<f32>], labels: &[usize], mode: FusionMode) -> Result<GroupEval> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    if dists.is_empty() {
        return Err(Error::invalid("no nodes to evaluate"));
    }
    if dists.iter().any(|d| d.rows() != labels.len() || d.cols() != dists[0].cols()) {
        return Err(Error::shape("node predictions do not line up with the labels"));
    }
    let n = labels.len() as f64;
    let per_node_acc: Vec<f64> = dists
        .iter()
        .map(|d| {
            d.argmax_rows()
                .iter()
                .zip(labels)
                .filter(|(a, b)| a == b)
                .count() as f64
                / n
        })
        .collect();
    let outcomes = (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let rows: Vec<Vec<f64>> = dists
                .iter()
                .map(|d| d.row(i).iter().map(|&p| p as f64).collect())
                .collect();
            collective_decision(&rows, mode).map(|g| (g.decision == labels[i], g.fallback))
        })
        .collect::<Result<Vec<_>>>()?;
    let hits = outcomes.iter().filter(|o| o.0).count();
    let fallbacks = outcomes.iter().filter(|o| o.1).count();
    Ok(GroupEval {
        avg_acc: per_node_acc.iter().sum::<f64>() / per_node_acc.len() as f64,
        per_node_acc,
        collective_acc: hits as f64 / n,
        fallbacks,
    })
}

/// Runs every model in eval mode on `ds` and fuses their softmax outputs.
pub fn evaluate_group(models: &[&Mlp<f32>], ds: &Dataset, mode: FusionMode) -> Result<GroupEval> {
    let dists = models
        .par_iter()
        .map(|m| softmax_with_temperature(&m.predict(ds.inputs())?, 1.0))
        .collect::<Result<Vec<_>>>()?;
    evaluate_distributions(&dists, ds.labels(), mode)
}
