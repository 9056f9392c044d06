//! Evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::data::{LabelVector, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probability that a random positive outscores a random negative, ties
/// counted as one half. Computed from midranks in `O(B log B)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("AUC is undefined with a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// `confusion[true][pred]`.
pub fn confusion_matrix(pred: &[usize], truth: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; num_classes]; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        m[t][p] += 1;
    }
    m
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Unweighted mean of per-class F1. A class with no true and no predicted
/// rows scores 0 and still counts towards the mean.
pub fn macro_f1(pred: &[usize], truth: &[usize], num_classes: usize) -> f64 {
    let m = confusion_matrix(pred, truth, num_classes);
    let mut total = 0.0;
    for c in 0..num_classes {
        let tp = m[c][c] as f64;
        let actual: usize = m[c].iter().sum();
        let predicted: usize = m.iter().map(|row| row[c]).sum();
        let denom = (actual + predicted) as f64;
        if denom > 0.0 {
            total += 2.0 * tp / denom;
        }
    }
    total / num_classes as f64
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mse = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / truth.len() as f64;
    mse.sqrt()
}

/// Row-wise softmax of `[B, C]` logits.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = logits.last_dim();
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub rmse: Option<f64>,
    pub confusion: Option<Vec<Vec<usize>>>,
}

impl EvalReport {
    /// Score to maximize: AUC for binary tasks (accuracy when AUC is
    /// undefined), macro-F1 for multi-class, `1 / (1 + RMSE)` for regression.
    pub fn primary(&self, task: Task) -> f64 {
        match task {
            Task::Classification { num_classes: 2 } => self.auc.or(self.accuracy).unwrap_or(0.0),
            Task::Classification { .. } => self.macro_f1.unwrap_or(0.0),
            Task::Regression => self.rmse.map_or(0.0, |r| 1.0 / (1.0 + r)),
        }
    }
}

/// Metrics for model outputs against labels.
pub fn evaluate(logits: &Tensor, labels: &LabelVector) -> Result<EvalReport> {
    if logits.shape()[0] != labels.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            logits.shape()[0],
            labels.len()
        )));
    }
    match labels {
        LabelVector::Regression { targets } => Ok(EvalReport {
            rmse: Some(rmse(logits.data(), targets)),
            ..EvalReport::default()
        }),
        LabelVector::Classification { labels, num_classes } => {
            let pred = argmax_rows(logits);
            let auc = if *num_classes == 2 {
                let probs = softmax_rows(logits);
                let scores: Vec<f64> = probs.data().chunks(2).map(|r| r[1]).collect();
                let truth: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
                roc_auc(&scores, &truth).ok()
            } else {
                None
            };
            Ok(EvalReport {
                auc,
                accuracy: Some(accuracy(&pred, labels)),
                macro_f1: Some(macro_f1(&pred, labels, *num_classes)),
                rmse: None,
                confusion: Some(confusion_matrix(&pred, labels, *num_classes)),
            })
        }
    }
}
