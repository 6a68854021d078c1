use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::PROB_FLOOR;
use crate::scalar::Scalar;

/// Classification metrics over a labelled set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top5: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    /// Average precision per class; `None` for classes without positives.
    pub per_class_ap: Vec<Option<f64>>,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub count: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Rank of class `y` when classes are ordered by descending probability with
/// ties toward the lower index (0 is the top).
pub fn rank_of<T: Scalar>(probs: &[T], y: usize) -> usize {
    let py = probs[y];
    probs.iter().enumerate().filter(|&(c, &p)| p > py || (p == py && c < y)).count()
}

/// `-ln(max(p_y, 1e-12))`.
pub fn cross_entropy<T: Scalar>(probs: &[T], y: usize) -> Result<f64> {
    let p = probs.get(y).ok_or(Error::InvalidClass { index: y, classes: probs.len() })?;
    Ok(-p.as_f64().max(PROB_FLOOR).ln())
}

/// Mean cross-entropy over a batch.
pub fn mean_cross_entropy<T: Scalar>(probs: &[Vec<T>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    let total: f64 = probs.iter().zip(labels).map(|(p, &y)| cross_entropy(p, y)).sum::<Result<f64>>()?;
    Ok(total / probs.len() as f64)
}

/// All-points average precision `sum_n (R_n - R_{n-1}) P_n` over items sorted
/// by descending score (stable, so ties keep input order). Each positive
/// raises recall by `1 / positives`, so this is the mean precision at the
/// ranks of the positives. `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut precision_sum) = (0usize, 0.0);
    for (n, &i) in order.iter().enumerate() {
        if positive[i] {
            tp += 1;
            precision_sum += tp as f64 / (n + 1) as f64;
        }
    }
    Some(precision_sum / total as f64)
}

/// Metrics from per-item probability vectors; this is also the test hook for
/// injecting predictions directly.
pub fn evaluate_predictions<T: Scalar>(probs: &[Vec<T>], labels: &[usize], classes: usize) -> Result<EvalReport> {
    if probs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    for (p, &y) in probs.iter().zip(labels) {
        if p.len() != classes {
            return Err(Error::InvalidArgument(format!("prediction has {} classes, expected {classes}", p.len())));
        }
        if y >= classes {
            return Err(Error::InvalidClass { index: y, classes });
        }
    }
    let n = probs.len() as f64;
    let mut confusion = vec![vec![0usize; classes]; classes];
    let (mut top1, mut top5) = (0usize, 0usize);
    for (p, &y) in probs.iter().zip(labels) {
        confusion[y][argmax(p)] += 1;
        let r = rank_of(p, y);
        top1 += usize::from(r == 0);
        top5 += usize::from(r < 5);
    }
    let per_class_ap: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c].as_f64()).collect();
            let positive: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            average_precision(&scores, &positive)
        })
        .collect();
    let present: Vec<f64> = per_class_ap.iter().flatten().copied().collect();
    let map = present.iter().sum::<f64>() / present.len() as f64;
    Ok(EvalReport { top1: top1 as f64 / n, top5: top5 as f64 / n, map, per_class_ap, confusion, count: probs.len() })
}
