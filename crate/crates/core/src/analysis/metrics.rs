//! Classification and segmentation metrics.

use crate::error::{Error, Result};

/// Area under the ROC curve as the Mann-Whitney statistic: the probability
/// that a random positive outscores a random negative, ties counting half.
pub fn auc(scores: &[f32], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", &[scores.len()], &[labels.len()]));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("auc label {l} not in {{0, 1}}")));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("auc score {i}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of the positives keeps every quantity integral.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average (i + j + 2) / 2.
        let twice_avg = (i + j + 2) as u64;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        twice_rank_sum += twice_avg * positives;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// `2 |P and G| / (|P| + |G|)` for binary masks; two empty masks score 1.
pub fn dice_score(pred: &[f32], gt: &[f32]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("dice_score", &[pred.len()], &[gt.len()]));
    }
    let binary = |m: &[f32]| m.iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary(pred) || !binary(gt) {
        return Err(Error::InvalidArgument("dice_score needs binary masks".into()));
    }
    let (mut inter, mut p, mut g) = (0u64, 0u64, 0u64);
    for (&a, &b) in pred.iter().zip(gt) {
        let (a, b) = (a == 1.0, b == 1.0);
        inter += (a && b) as u64;
        p += a as u64;
        g += b as u64;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok((2 * inter) as f64 / (p + g) as f64)
}

/// `values >= threshold` as a 0/1 mask.
pub fn binarize(values: &[f32], threshold: f32) -> Vec<f32> {
    values.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[0, 1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn dice_examples() {
        let gt = [1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(dice_score(&gt, &gt).unwrap(), 1.0);
        let disjoint = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(dice_score(&disjoint, &gt).unwrap(), 0.0);
        let half = [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        assert_eq!(dice_score(&half, &gt).unwrap(), 0.5);
        assert_eq!(dice_score(&[0.0; 3], &[0.0; 3]).unwrap(), 1.0);
        assert!(dice_score(&[0.5], &[1.0]).is_err());
    }
}
