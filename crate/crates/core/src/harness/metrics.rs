//! Classification metrics.

use std::collections::BTreeSet;

/// Unweighted mean of per-class F1 over the classes that occur in either
/// `truth` or `pred`. Zero for empty input.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> f64 {
    assert_eq!(truth.len(), pred.len(), "label vectors differ in length");
    let classes: BTreeSet<usize> = truth.iter().chain(pred).copied().collect();
    if classes.is_empty() {
        return 0.0;
    }
    let n = classes.iter().max().map_or(0, |&m| m + 1);
    let mut tp = vec![0usize; n];
    let mut fp = vec![0usize; n];
    let mut fn_ = vec![0usize; n];
    for (&t, &p) in truth.iter().zip(pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if denom == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    total / classes.len() as f64
}

pub fn accuracy(truth: &[usize], pred: &[usize]) -> f64 {
    assert_eq!(truth.len(), pred.len(), "label vectors differ in length");
    if truth.is_empty() {
        return 0.0;
    }
    truth.iter().zip(pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64
}

/// Macro-F1 over each trailing window. Entry `k` covers samples
/// `k..k + window`; the series is empty when the stream is shorter than
/// the window.
pub fn rolling_f1(truth: &[usize], pred: &[usize], window: usize) -> Vec<f64> {
    assert!(window > 0, "window must be positive");
    if truth.len() < window {
        return Vec::new();
    }
    (0..=truth.len() - window)
        .map(|k| macro_f1(&truth[k..k + window], &pred[k..k + window]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2, 2], &[0, 1, 2, 2]), 1.0);
        assert_eq!(macro_f1(&[0, 1, 0, 1], &[0, 0, 1, 1]), 0.5);
        assert_eq!(macro_f1(&[0, 1, 0], &[1, 0, 1]), 0.0);
        assert_eq!(macro_f1(&[], &[]), 0.0);
    }

    #[test]
    fn constant_predictor_on_a_balanced_six_class_split() {
        let truth: Vec<usize> = (0..60).map(|i| i % 6).collect();
        let pred = vec![3; 60];
        assert_eq!(accuracy(&truth, &pred), 1.0 / 6.0);
        assert!((macro_f1(&truth, &pred) - 1.0 / 21.0).abs() < 1e-12);
    }

    fn brute_force(truth: &[usize], pred: &[usize]) -> f64 {
        let k = truth.iter().chain(pred).max().map_or(0, |m| m + 1);
        let mut confusion = vec![vec![0usize; k]; k];
        for (&t, &p) in truth.iter().zip(pred) {
            confusion[t][p] += 1;
        }
        let mut scores = Vec::new();
        for c in 0..k {
            let tp = confusion[c][c] as f64;
            let actual: usize = confusion[c].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[c]).sum();
            if actual + predicted == 0 {
                continue;
            }
            let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            scores.push(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) });
        }
        scores.iter().sum::<f64>() / scores.len() as f64
    }

    proptest! {
        #[test]
        fn macro_f1_matches_the_confusion_matrix(pairs in prop::collection::vec((0usize..6, 0usize..6), 1..200)) {
            let (truth, pred): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            prop_assert!((macro_f1(&truth, &pred) - brute_force(&truth, &pred)).abs() < 1e-9);
        }
    }

    #[test]
    fn rolling_series_examples() {
        let truth: Vec<usize> = (0..250).map(|i| i % 2).collect();
        assert!(rolling_f1(&truth, &truth, 100).iter().all(|&f| f == 1.0));
        assert_eq!(rolling_f1(&truth, &truth, 100).len(), 151);
        assert!(rolling_f1(&truth[..50], &truth[..50], 100).is_empty());
    }

    #[test]
    fn rolling_series_reaches_one_a_window_after_a_step_change() {
        let change = 150;
        let truth: Vec<usize> = (0..400).map(|i| i % 2).collect();
        let pred: Vec<usize> = truth.iter().enumerate().map(|(i, &t)| if i < change { 1 - t } else { t }).collect();
        let series = rolling_f1(&truth, &pred, 100);
        // Entry k ends at sample k + 99; the first all-correct window starts at the change.
        let first = series.iter().position(|&f| f == 1.0).unwrap();
        assert_eq!(first + 99, change + 99);
        assert!(series[..first].iter().all(|&f| f < 1.0));
    }
}
