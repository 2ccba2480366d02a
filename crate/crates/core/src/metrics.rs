//! Threshold-free detection metrics with exactly specified tie handling.
//!
//! Scores follow the convention "higher means more likely attack", and a
//! threshold `t` flags everything with `score >= t`.
//!
//! - ROC-AUC is the rank statistic `P(s_pos > s_neg) + 0.5 P(s_pos = s_neg)`.
//! - Average precision groups tied scores: precision is evaluated after an
//!   entire tie group enters the flagged set, never mid-group.
//! - `fpr_at_tpr` returns the smallest false-positive rate achievable by any
//!   score threshold whose true-positive rate reaches the target, together
//!   with that threshold.
//!
//! Every metric is undefined (an error, never a silent NaN) when a class is
//! missing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Detection scores with binary ground truth (`true` = attack/positive).
#[derive(Debug, Clone)]
pub struct ScoredBatch {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredBatch {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Config(format!(
                "scores ({}) and labels ({}) differ in length",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::UndefinedMetric("empty batch".into()));
        }
        if !scores.iter().all(|s| s.is_finite()) {
            return Err(Error::UndefinedMetric("scores must be finite".into()));
        }
        Ok(ScoredBatch { scores, labels })
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| **l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let p = self.positives();
        let n = self.negatives();
        if p == 0 || n == 0 {
            return Err(Error::UndefinedMetric(format!(
                "need both classes, got {p} positives / {n} negatives"
            )));
        }
        Ok((p, n))
    }

    /// Indices sorted by descending score (ties in input order).
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| {
            self.scores[b]
                .partial_cmp(&self.scores[a])
                .expect("scores validated finite")
        });
        idx
    }
}

/// Summary of one scored evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub roc_auc: f64,
    pub average_precision: f64,
    pub fpr_at_tpr95: f64,
    pub threshold_at_tpr95: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Compute all standard metrics of a batch.
pub fn metrics_report(batch: &ScoredBatch) -> Result<MetricsReport> {
    let (fpr, threshold) = fpr_at_tpr(batch, 0.95)?;
    Ok(MetricsReport {
        roc_auc: roc_auc(batch)?,
        average_precision: average_precision(batch)?,
        fpr_at_tpr95: fpr,
        threshold_at_tpr95: threshold,
        positives: batch.positives(),
        negatives: batch.negatives(),
    })
}

/// Rank-based ROC-AUC with tied scores counting one half.
pub fn roc_auc(batch: &ScoredBatch) -> Result<f64> {
    let (p, n) = batch.require_both_classes()?;
    // Midrank assignment over ascending order.
    let mut idx: Vec<usize> = (0..batch.scores.len()).collect();
    idx.sort_by(|&a, &b| {
        batch.scores[a]
            .partial_cmp(&batch.scores[b])
            .expect("scores validated finite")
    });
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && batch.scores[idx[end + 1]] == batch.scores[idx[start]] {
            end += 1;
        }
        // 1-based midrank shared by the whole tie group.
        let midrank = (start + end + 2) as f64 / 2.0;
        for &i in &idx[start..=end] {
            if batch.labels[i] {
                rank_sum_pos += midrank;
            }
        }
        start = end + 1;
    }
    let p_f = p as f64;
    Ok((rank_sum_pos - p_f * (p_f + 1.0) / 2.0) / (p_f * n as f64))
}

/// Average precision with tie groups entering the flagged set atomically.
pub fn average_precision(batch: &ScoredBatch) -> Result<f64> {
    let (p, _) = batch.require_both_classes()?;
    let order = batch.descending();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = batch.scores[order[i]];
        let mut j = i;
        while j < order.len() && batch.scores[order[j]] == score {
            if batch.labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / p as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Smallest false-positive rate over thresholds whose true-positive rate
/// reaches `target_tpr`, with the threshold that achieves it. Among equal
/// FPRs the highest TPR wins, then the largest threshold.
pub fn fpr_at_tpr(batch: &ScoredBatch, target_tpr: f64) -> Result<(f64, f64)> {
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::Config(format!(
            "target TPR must be in (0, 1], got {target_tpr}"
        )));
    }
    let (p, n) = batch.require_both_classes()?;
    let order = batch.descending();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut best: Option<(f64, f64, f64)> = None; // (fpr, tpr, threshold)
    let mut i = 0;
    while i < order.len() {
        let score = batch.scores[order[i]];
        let mut j = i;
        while j < order.len() && batch.scores[order[j]] == score {
            if batch.labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let tpr = tp as f64 / p as f64;
        let fpr = fp as f64 / n as f64;
        if tpr >= target_tpr {
            let better = match best {
                None => true,
                Some((bf, bt, bth)) => {
                    fpr < bf
                        || (fpr == bf && tpr > bt)
                        || (fpr == bf && tpr == bt && score > bth)
                }
            };
            if better {
                best = Some((fpr, tpr, score));
            }
        }
        i = j;
    }
    let (fpr, _, threshold) = best.expect("threshold at the minimum score reaches TPR 1");
    Ok((fpr, threshold))
}

/// ROC curve as `(fpr, tpr, threshold)` rows, starting at `(0, 0, +inf)`.
pub fn roc_curve(batch: &ScoredBatch) -> Result<Vec<(f64, f64, f64)>> {
    let (p, n) = batch.require_both_classes()?;
    let order = batch.descending();
    let mut points = vec![(0.0, 0.0, f64::INFINITY)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let score = batch.scores[order[i]];
        let mut j = i;
        while j < order.len() && batch.scores[order[j]] == score {
            if batch.labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / n as f64, tp as f64 / p as f64, score));
        i = j;
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    fn batch(scores: &[f64], labels: &[bool]) -> ScoredBatch {
        ScoredBatch::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    /// O(P*N) pairwise oracle for ROC-AUC.
    fn auc_oracle(b: &ScoredBatch) -> f64 {
        let mut num = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in b.labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in b.labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if b.scores[i] > b.scores[j] {
                    num += 1.0;
                } else if b.scores[i] == b.scores[j] {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    /// Naive per-threshold oracle for average precision.
    fn ap_oracle(b: &ScoredBatch) -> f64 {
        let mut thresholds: Vec<f64> = b.scores.clone();
        thresholds.sort_by(|x, y| y.partial_cmp(x).unwrap());
        thresholds.dedup();
        let p = b.labels.iter().filter(|l| **l).count() as f64;
        let mut prev_recall = 0.0;
        let mut ap = 0.0;
        for &t in &thresholds {
            let tp = b
                .scores
                .iter()
                .zip(&b.labels)
                .filter(|(s, l)| **s >= t && **l)
                .count() as f64;
            let flagged = b.scores.iter().filter(|s| **s >= t).count() as f64;
            let recall = tp / p;
            let precision = tp / flagged;
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        ap
    }

    /// Naive per-threshold oracle for FPR at a TPR target.
    fn fpr_oracle(b: &ScoredBatch, target: f64) -> f64 {
        let mut thresholds: Vec<f64> = b.scores.clone();
        thresholds.sort_by(|x, y| y.partial_cmp(x).unwrap());
        thresholds.dedup();
        let p = b.labels.iter().filter(|l| **l).count() as f64;
        let n = b.labels.len() as f64 - p;
        let mut best = f64::INFINITY;
        for &t in &thresholds {
            let tp = b
                .scores
                .iter()
                .zip(&b.labels)
                .filter(|(s, l)| **s >= t && **l)
                .count() as f64;
            let fp = b
                .scores
                .iter()
                .zip(&b.labels)
                .filter(|(s, l)| **s >= t && !**l)
                .count() as f64;
            if tp / p >= target {
                best = best.min(fp / n);
            }
        }
        best
    }

    #[test]
    fn auc_hand_case() {
        // Positive pair wins 3 of 4 comparisons.
        let b = batch(&[0.9, 0.8, 0.7, 0.3], &[true, false, true, false]);
        assert!((roc_auc(&b).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn auc_tie_counts_half() {
        let b = batch(&[0.5, 0.5], &[true, false]);
        assert!((roc_auc(&b).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auc_extremes() {
        let perfect = batch(&[1.0, 0.9, 0.1, 0.0], &[true, true, false, false]);
        assert_eq!(roc_auc(&perfect).unwrap(), 1.0);
        let reversed = batch(&[0.0, 0.1, 0.9, 1.0], &[true, true, false, false]);
        assert_eq!(roc_auc(&reversed).unwrap(), 0.0);
    }

    #[test]
    fn ap_hand_case() {
        // Groups: t=0.9 -> P=1, dR=1/2; t=0.7 -> P=2/3, dR=1/2.
        let b = batch(&[0.9, 0.8, 0.7, 0.3], &[true, false, true, false]);
        assert!((average_precision(&b).unwrap() - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn fpr_at_tpr_hand_case() {
        let b = batch(&[0.9, 0.8, 0.7, 0.3], &[true, false, true, false]);
        let (fpr, threshold) = fpr_at_tpr(&b, 0.95).unwrap();
        assert_eq!(fpr, 0.5);
        assert_eq!(threshold, 0.7);
    }

    #[test]
    fn fuzzed_batches_match_oracles_exactly() {
        let mut rng = RngState::new(61);
        for round in 0..200 {
            let n = 2 + rng.uniform_usize(99);
            // Quantized scores force plenty of exact ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.uniform(-2.0, 2.0) * 4.0).round() / 4.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.5).collect();
            // Guarantee both classes.
            labels[0] = true;
            if labels.iter().all(|l| *l) {
                labels[n - 1] = false;
            }
            let b = ScoredBatch::new(scores, labels).unwrap();
            assert!(
                (roc_auc(&b).unwrap() - auc_oracle(&b)).abs() <= 1e-12,
                "auc mismatch in round {round}"
            );
            assert!(
                (average_precision(&b).unwrap() - ap_oracle(&b)).abs() <= 1e-12,
                "ap mismatch in round {round}"
            );
            let (fpr, _) = fpr_at_tpr(&b, 0.95).unwrap();
            assert!(
                (fpr - fpr_oracle(&b, 0.95)).abs() <= 1e-12,
                "fpr mismatch in round {round}"
            );
        }
    }

    #[test]
    fn label_flip_symmetry() {
        let mut rng = RngState::new(62);
        for _ in 0..50 {
            let n = 4 + rng.uniform_usize(60);
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform(0.0, 1.0)).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.5).collect();
            labels[0] = true;
            labels[1] = false;
            let b = ScoredBatch::new(scores.clone(), labels.clone()).unwrap();
            let flipped =
                ScoredBatch::new(scores, labels.iter().map(|l| !l).collect()).unwrap();
            assert!(
                (roc_auc(&b).unwrap() + roc_auc(&flipped).unwrap() - 1.0).abs() <= 1e-12
            );
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = RngState::new(63);
        let n = 40;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.4).collect();
        labels[0] = true;
        labels[1] = false;
        let b = ScoredBatch::new(scores.clone(), labels.clone()).unwrap();
        let transformed = ScoredBatch::new(
            scores.iter().map(|s| (3.0 * s).exp() + 7.0).collect(),
            labels,
        )
        .unwrap();
        assert!((roc_auc(&b).unwrap() - roc_auc(&transformed).unwrap()).abs() <= 1e-12);
        assert!(
            (average_precision(&b).unwrap() - average_precision(&transformed).unwrap()).abs()
                <= 1e-12
        );
    }

    #[test]
    fn degenerate_batches_are_errors() {
        assert!(ScoredBatch::new(vec![], vec![]).is_err());
        assert!(ScoredBatch::new(vec![f64::NAN], vec![true]).is_err());
        assert!(ScoredBatch::new(vec![0.1], vec![true, false]).is_err());
        let single = batch(&[0.5, 0.6], &[true, true]);
        assert!(matches!(roc_auc(&single), Err(Error::UndefinedMetric(_))));
        assert!(matches!(
            average_precision(&single),
            Err(Error::UndefinedMetric(_))
        ));
        let ok = batch(&[0.5, 0.6], &[true, false]);
        assert!(fpr_at_tpr(&ok, 0.0).is_err());
        assert!(fpr_at_tpr(&ok, 1.5).is_err());
    }

    #[test]
    fn roc_curve_spans_unit_square() {
        let b = batch(&[0.9, 0.8, 0.7, 0.3], &[true, false, true, false]);
        let curve = roc_curve(&b).unwrap();
        assert_eq!(curve.first().unwrap().0, 0.0);
        assert_eq!(curve.first().unwrap().1, 0.0);
        assert_eq!(curve.last().unwrap().0, 1.0);
        assert_eq!(curve.last().unwrap().1, 1.0);
        // Monotone in both coordinates.
        for w in curve.windows(2) {
            assert!(w[1].0 >= w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
    }
}
