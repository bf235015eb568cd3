//! Classification and consistency losses, and the per-sample aggregation
//! over an uncertainty set.

use serde::{Deserialize, Serialize};

use crate::augment::UncertaintySet;
use crate::autodiff::argmax;
use crate::autodiff::kernels::{log_sum_exp, softmax_rows};
use crate::autodiff::Tensor;
use crate::model::Network;
use crate::{Error, Result};

pub const DEFAULT_EPS: f64 = 0.05;

/// `1` when the labels differ.
pub fn zero_one(pred: usize, label: usize, n_classes: usize) -> Result<f64> {
    if pred >= n_classes || label >= n_classes {
        return Err(Error::Config(format!(
            "labels ({pred}, {label}) out of range for {n_classes} classes"
        )));
    }
    Ok(if pred != label { 1.0 } else { 0.0 })
}

/// `log Σ_i exp(s_i − s_y)` on raw scores.
pub fn ce_hard(scores: &[f64], label: usize) -> Result<f64> {
    if label >= scores.len() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} scores",
            scores.len()
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ce_hard scores".into()));
    }
    let shifted: Vec<f64> = scores.iter().map(|s| s - scores[label]).collect();
    Ok(log_sum_exp(&shifted).max(0.0))
}

pub fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::Config(format!(
            "clamp epsilon {eps} outside (0, 0.5)"
        )));
    }
    Ok(())
}

/// Coordinatewise clamp to `[eps, 1 − eps]`, without renormalizing.
pub fn clamp_probs(p: &[f64], eps: f64) -> Vec<f64> {
    p.iter().map(|v| v.clamp(eps, 1.0 - eps)).collect()
}

/// `−Σ t_i log s_i` with both vectors clamped to `[eps, 1 − eps]`.
pub fn ce_soft(probs: &[f64], targets: &[f64], eps: f64) -> Result<f64> {
    check_eps(eps)?;
    if probs.len() != targets.len() {
        return Err(Error::shape("ce_soft", &[probs.len()], &[targets.len()]));
    }
    Ok(probs
        .iter()
        .zip(targets)
        .map(|(s, t)| -t.clamp(eps, 1.0 - eps) * s.clamp(eps, 1.0 - eps).ln())
        .sum())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregator {
    #[default]
    Max,
    Mean,
    Min,
}

/// Reduces one row of variant losses to `(value, chosen index)`. Ties go to
/// the smallest index; the mean reports index 0.
pub fn aggregate(losses: &[f64], mode: Aggregator) -> Result<(f64, usize)> {
    if losses.is_empty() {
        return Err(Error::config("cannot aggregate an empty loss row"));
    }
    Ok(match mode {
        Aggregator::Mean => (losses.iter().sum::<f64>() / losses.len() as f64, 0),
        Aggregator::Max => pick(losses, |a, b| a > b),
        Aggregator::Min => pick(losses, |a, b| a < b),
    })
}

fn pick(losses: &[f64], better: impl Fn(f64, f64) -> bool) -> (f64, usize) {
    let mut best = (losses[0], 0);
    for (j, &v) in losses.iter().enumerate().skip(1) {
        if better(v, best.0) {
            best = (v, j);
        }
    }
    best
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetMode {
    /// Hard cross-entropy against the argmax of the frozen weak-view output.
    #[default]
    PseudoLabel,
    /// Clamped soft cross-entropy against the frozen weak-view probabilities.
    Soft,
}

/// Loss of each variant's scores against one frozen target.
pub fn consistency_row(
    target_scores: &[f64],
    variant_scores: &[&[f64]],
    mode: TargetMode,
    eps: f64,
) -> Result<Vec<f64>> {
    if variant_scores.is_empty() {
        return Err(Error::config("uncertainty set needs at least one variant"));
    }
    let n = target_scores.len();
    match mode {
        TargetMode::PseudoLabel => {
            let y = argmax(target_scores);
            variant_scores.iter().map(|s| ce_hard(s, y)).collect()
        }
        TargetMode::Soft => {
            let t = softmax_rows(target_scores, n);
            variant_scores
                .iter()
                .map(|s| ce_soft(&softmax_rows(s, n), &t, eps))
                .collect()
        }
    }
}

/// Per-sample, per-variant consistency losses of one unlabeled batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyBatchLosses {
    /// `B_u × K` loss matrix.
    pub losses: Vec<Vec<f64>>,
    /// Whether the frozen weak-view confidence exceeded the threshold.
    pub mask: Vec<bool>,
    /// Index chosen by the aggregator in each row.
    pub chosen: Vec<usize>,
    /// Aggregated value of each row.
    pub values: Vec<f64>,
    /// Argmax of the frozen weak-view scores.
    pub pseudo_labels: Vec<usize>,
    /// Frozen weak-view class probabilities, row-major.
    pub target_probs: Vec<Vec<f64>>,
}

impl ConsistencyBatchLosses {
    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    pub fn mask_rate(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&m| m).count() as f64 / self.mask.len() as f64
    }

    /// Mean over the batch of the masked aggregated values.
    pub fn batch_loss(&self) -> f64 {
        self.masked_mean(|i| self.values[i])
    }

    /// Batch loss under a different aggregator, same rows and mask.
    pub fn batch_loss_with(&self, mode: Aggregator) -> Result<f64> {
        let values = self
            .losses
            .iter()
            .map(|row| aggregate(row, mode).map(|(v, _)| v))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.masked_mean(|i| values[i]))
    }

    /// Batch loss that always takes variant `j`.
    pub fn batch_loss_of_variant(&self, j: usize) -> f64 {
        self.masked_mean(|i| self.losses[i][j])
    }

    fn masked_mean(&self, value: impl Fn(usize) -> f64) -> f64 {
        if self.losses.is_empty() {
            return 0.0;
        }
        let total: f64 = (0..self.losses.len())
            .filter(|&i| self.mask[i])
            .map(value)
            .sum();
        total / self.losses.len() as f64
    }
}

/// Scores every variant of every set with one batched forward pass and
/// reduces each row.
///
/// `weak` holds the weak views `(B_u, d)` the sets were built from; the
/// network is evaluated on them without gradient tracking to produce targets.
pub fn consistency_batch(
    net: &Network,
    weak: &Tensor,
    usets: &[UncertaintySet],
    beta: f64,
    aggregator: Aggregator,
    target_mode: TargetMode,
    eps: f64,
) -> Result<ConsistencyBatchLosses> {
    if target_mode == TargetMode::Soft {
        check_eps(eps)?;
    }
    let b = usets.len();
    if weak.rows() != b {
        return Err(Error::shape("consistency_batch", &[weak.rows()], &[b]));
    }
    let n_c = net.classes();
    let target_scores = net.forward(weak)?;
    let target_probs = softmax_rows(target_scores.data(), n_c);

    let d = net.input_len();
    let mut stacked = Vec::new();
    let mut offsets = Vec::with_capacity(b + 1);
    offsets.push(0);
    for set in usets {
        if set.variants.is_empty() {
            return Err(Error::config("uncertainty set needs at least one variant"));
        }
        for v in &set.variants {
            stacked.extend_from_slice(v);
        }
        offsets.push(offsets.last().unwrap() + set.variants.len());
    }
    let rows = *offsets.last().unwrap();
    let variant_scores = net.forward(&Tensor::new(vec![rows, d], stacked)?)?;

    let mut out = ConsistencyBatchLosses {
        losses: Vec::with_capacity(b),
        mask: Vec::with_capacity(b),
        chosen: Vec::with_capacity(b),
        values: Vec::with_capacity(b),
        pseudo_labels: Vec::with_capacity(b),
        target_probs: Vec::with_capacity(b),
    };
    for i in 0..b {
        let target = target_scores.row(i);
        let probs = &target_probs[i * n_c..(i + 1) * n_c];
        let scores: Vec<&[f64]> = (offsets[i]..offsets[i + 1])
            .map(|r| variant_scores.row(r))
            .collect();
        let row = consistency_row(target, &scores, target_mode, eps)?;
        let (value, idx) = aggregate(&row, aggregator)?;
        let confidence = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.mask.push(confidence > beta);
        out.losses.push(row);
        out.chosen.push(idx);
        out.values.push(value);
        out.pseudo_labels.push(argmax(target));
        out.target_probs.push(probs.to_vec());
    }
    Ok(out)
}

/// `(batch loss, mask rate)` of the thresholded worst-case consistency term.
pub fn fixmatch_unlabeled_loss(
    net: &Network,
    weak: &Tensor,
    usets: &[UncertaintySet],
    beta: f64,
    aggregator: Aggregator,
    target_mode: TargetMode,
    eps: f64,
) -> Result<(f64, f64)> {
    let batch = consistency_batch(net, weak, usets, beta, aggregator, target_mode, eps)?;
    Ok((batch.batch_loss(), batch.mask_rate()))
}

pub fn total_loss(supervised: f64, unsupervised: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return supervised;
    }
    supervised + lambda * unsupervised
}
