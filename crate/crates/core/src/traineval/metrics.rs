use crate::error::{Error, Result};

/// `(fpr, tpr)` pairs from `(0, 0)` to `(1, 1)`, non-decreasing in both.
#[derive(Clone, Debug, PartialEq)]
pub struct RocPoints(pub Vec<(f64, f64)>);

/// Sweeps a threshold down through the distinct scores; tied scores move
/// both rates in one step.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Result<RocPoints> {
    if scores.len() != labels.len() {
        return Err(Error::arg(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {s} is not a number")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric("ROC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    // the sweep ends at exactly (1, 1) because every sample has been counted
    Ok(RocPoints(points))
}

/// Trapezoid area under an ROC curve.
pub fn auc(points: &RocPoints) -> f64 {
    points
        .0
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

pub fn auc_from_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    Ok(auc(&roc_points(scores, labels)?))
}

/// One-vs-rest AUC per class and their mean over the classes that have both
/// positives and negatives. Returns `(macro, per-class)`; a skipped class is
/// `None`, and the macro value is `None` when every class was skipped.
pub fn macro_auc(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<(Option<f64>, Vec<Option<f64>>)> {
    if probs.len() != labels.len() {
        return Err(Error::arg(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let is_c: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let pos = is_c.iter().filter(|&&b| b).count();
        if pos == 0 || pos == is_c.len() {
            per_class.push(None);
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        per_class.push(Some(auc_from_scores(&scores, &is_c)?));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let m = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok((m, per_class))
}
