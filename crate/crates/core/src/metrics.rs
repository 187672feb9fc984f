//! Agreement and accuracy metrics over per-format predictions.

use serde::{Deserialize, Serialize};

use crate::consensus::{consensus_label, vote_counts};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("agreement needs at least 2 variations, got {got}")]
    TooFewVariations { got: usize },
    #[error("vote counts sum to {got}, expected {expected}")]
    CountSum { expected: usize, got: usize },
    #[error("no instances to average over")]
    Empty,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {labels} labels")]
    LabelOutOfRange { label: usize, labels: usize },
    #[error("no formats to summarize")]
    NoFormats,
}

/// Probability that two distinct, uniformly drawn variations agree.
pub fn per_item_agreement(counts: &[usize], variations: usize) -> Result<f64, MetricsError> {
    if variations < 2 {
        return Err(MetricsError::TooFewVariations { got: variations });
    }
    let total: usize = counts.iter().sum();
    if total != variations {
        return Err(MetricsError::CountSum {
            expected: variations,
            got: total,
        });
    }
    let agreeing: usize = counts.iter().map(|&n| n * n.saturating_sub(1)).sum();
    Ok(agreeing as f64 / (variations * (variations - 1)) as f64)
}

/// Mean of [`per_item_agreement`] over instances.
pub fn observed_agreement(counts: &[Vec<usize>], variations: usize) -> Result<f64, MetricsError> {
    if counts.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sum = 0.0;
    for c in counts {
        sum += per_item_agreement(c, variations)?;
    }
    Ok(sum / counts.len() as f64)
}

fn check_labels(xs: &[usize], labels: usize) -> Result<(), MetricsError> {
    match xs.iter().find(|&&x| x >= labels) {
        Some(&label) => Err(MetricsError::LabelOutOfRange { label, labels }),
        None => Ok(()),
    }
}

/// Per-class F₁; a class with no true positives scores 0.
pub fn per_class_f1(predictions: &[usize], gold: &[usize], labels: usize) -> Result<Vec<f64>, MetricsError> {
    if predictions.len() != gold.len() {
        return Err(MetricsError::LengthMismatch {
            expected: gold.len(),
            got: predictions.len(),
        });
    }
    check_labels(predictions, labels)?;
    check_labels(gold, labels)?;
    let mut tp = vec![0usize; labels];
    let mut fp = vec![0usize; labels];
    let mut fneg = vec![0usize; labels];
    for (&p, &g) in predictions.iter().zip(gold) {
        if p == g {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[g] += 1;
        }
    }
    Ok((0..labels)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fneg[c];
            if tp[c] == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .collect())
}

/// Unweighted mean of per-class F₁ over all `labels` classes.
pub fn macro_f1(predictions: &[usize], gold: &[usize], labels: usize) -> Result<f64, MetricsError> {
    let f1 = per_class_f1(predictions, gold, labels)?;
    Ok(f1.iter().sum::<f64>() / labels as f64)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Format ids the report covers, aligned with `per_format_f1`.
    pub formats: Vec<usize>,
    pub per_format_f1: Vec<f64>,
    pub f1_mean: f64,
    pub f1_std: f64,
    /// Absent when fewer than two formats were evaluated.
    pub p_o: Option<f64>,
    pub per_item_p: Vec<f64>,
    /// Accuracy of strict-majority labels on covered instances; absent when nothing is covered.
    pub majority_accuracy: Option<f64>,
    pub coverage: f64,
    pub instances: usize,
    pub covered: usize,
}

/// Full report from `predictions[format][instance]` and gold labels.
pub fn summarize(
    formats: &[usize],
    predictions: &[Vec<usize>],
    gold: &[usize],
    labels: usize,
) -> Result<MetricsReport, MetricsError> {
    if predictions.is_empty() {
        return Err(MetricsError::NoFormats);
    }
    if formats.len() != predictions.len() {
        return Err(MetricsError::LengthMismatch {
            expected: predictions.len(),
            got: formats.len(),
        });
    }
    if gold.is_empty() {
        return Err(MetricsError::Empty);
    }
    let per_format_f1 = predictions
        .iter()
        .map(|p| macro_f1(p, gold, labels))
        .collect::<Result<Vec<_>, _>>()?;

    let v = predictions.len();
    let mut per_item_p = Vec::new();
    let mut covered = 0;
    let mut correct = 0;
    for (i, &g) in gold.iter().enumerate() {
        let preds: Vec<usize> = predictions.iter().map(|p| p[i]).collect();
        let counts = vote_counts(&preds, labels).map_err(|_| MetricsError::LabelOutOfRange {
            label: preds.iter().copied().max().unwrap_or(0),
            labels,
        })?;
        if v >= 2 {
            per_item_p.push(per_item_agreement(&counts, v)?);
        }
        if let Some(c) = consensus_label(&counts, v) {
            covered += 1;
            correct += usize::from(c == g);
        }
    }
    let p_o = (v >= 2).then(|| mean(&per_item_p));
    Ok(MetricsReport {
        formats: formats.to_vec(),
        f1_mean: mean(&per_format_f1),
        f1_std: population_std(&per_format_f1),
        per_format_f1,
        p_o,
        per_item_p,
        majority_accuracy: (covered > 0).then(|| correct as f64 / covered as f64),
        coverage: covered as f64 / gold.len() as f64,
        instances: gold.len(),
        covered,
    })
}
