//! The six evaluation metrics, validation/test deltas and seed aggregation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use num_traits::Float;

use crate::error::{Error, Result};

/// Column order used everywhere metrics are serialized.
pub const METRIC_NAMES: [&str; 6] = ["accuracy", "precision", "recall", "f1", "auroc", "auprc"];

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auroc: f64,
    pub auprc: f64,
}

impl Scores {
    pub fn to_array(&self) -> [f64; 6] {
        [self.accuracy, self.precision, self.recall, self.f1, self.auroc, self.auprc]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Scores { accuracy: a[0], precision: a[1], recall: a[2], f1: a[3], auroc: a[4], auprc: a[5] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dataset: String,
    pub split: String,
    pub seed: u64,
    /// Training-data ratio for few-shot runs.
    pub ratio: Option<f64>,
    pub scores: Scores,
}

impl MetricReport {
    pub fn new(dataset: &str, split: &str, seed: u64, ratio: Option<f64>, scores: Scores) -> Self {
        MetricReport { dataset: dataset.into(), split: split.into(), seed, ratio, scores }
    }
}

/// Per-class counts and rates for one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub support: usize,
    pub predicted: usize,
    pub true_positive: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean, 0 when both inputs are 0.
pub fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn check_inputs(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::Empty("evaluation samples"));
    }
    if probs.len() != labels.len() {
        return Err(Error::shape("evaluate", format!("{} score rows for {} labels", probs.len(), labels.len())));
    }
    for (i, (row, &y)) in probs.iter().zip(labels).enumerate() {
        if row.len() != classes {
            return Err(Error::shape("evaluate", format!("row {i} has {} scores, K = {classes}", row.len())));
        }
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "evaluate" });
        }
    }
    Ok(())
}

/// Per-class precision/recall/F1 from argmax predictions. Zero denominators give 0.
pub fn class_stats(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Vec<ClassStats>> {
    check_inputs(probs, labels, classes)?;
    let mut support = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut tp = vec![0usize; classes];
    for (row, &y) in probs.iter().zip(labels) {
        let p = argmax(row);
        support[y] += 1;
        predicted[p] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    Ok((0..classes)
        .map(|k| {
            let precision = if predicted[k] == 0 { 0.0 } else { tp[k] as f64 / predicted[k] as f64 };
            let recall = if support[k] == 0 { 0.0 } else { tp[k] as f64 / support[k] as f64 };
            ClassStats {
                support: support[k],
                predicted: predicted[k],
                true_positive: tp[k],
                precision,
                recall,
                f1: harmonic(precision, recall),
            }
        })
        .collect())
}

/// Binary AUROC with midranks for ties, i.e. `P(s+ > s-) + P(s+ = s-)/2`.
/// `None` if either class is empty.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; the tie group i..=j shares their average.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&s| positive[s]).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Average precision: sum over distinct thresholds of `(R_t - R_{t-1}) * P_t`.
/// `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        tp += order[i..=j].iter().filter(|&&s| positive[s]).count();
        seen += j - i + 1;
        let recall = tp as f64 / n_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

fn one_vs_rest(probs: &[Vec<f64>], labels: &[usize], k: usize) -> (Vec<f64>, Vec<bool>) {
    (probs.iter().map(|r| r[k]).collect(), labels.iter().map(|&y| y == k).collect())
}

/// Macro one-vs-rest AUROC over classes where it is defined (0 if none is).
pub fn auroc_ovr(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
    check_inputs(probs, labels, classes)?;
    let vals: Vec<f64> = (0..classes)
        .filter_map(|k| {
            let (s, p) = one_vs_rest(probs, labels, k);
            auroc_binary(&s, &p)
        })
        .collect();
    if vals.is_empty() {
        log::warn!("AUROC undefined for every class (single-class samples), reporting 0");
        return Ok(0.0);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Macro one-vs-rest average precision over classes present in `labels`.
pub fn auprc_ovr(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
    check_inputs(probs, labels, classes)?;
    let vals: Vec<f64> = (0..classes)
        .filter_map(|k| {
            let (s, p) = one_vs_rest(probs, labels, k);
            average_precision(&s, &p)
        })
        .collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// All six metrics. Precision/recall/F1 are macro-averaged over classes that
/// occur in `labels`; absent classes are skipped with a warning.
pub fn evaluate(probs: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<Scores> {
    let stats = class_stats(probs, labels, classes)?;
    let correct: usize = stats.iter().map(|s| s.true_positive).sum();
    let present: Vec<&ClassStats> = stats.iter().filter(|s| s.support > 0).collect();
    if present.len() < classes {
        log::warn!("{} of {classes} classes absent from evaluation samples; skipped in macro averages", classes - present.len());
    }
    for s in &present {
        if s.predicted == 0 {
            log::warn!("a class is never predicted; its precision counts as 0");
        }
    }
    let n = present.len() as f64;
    let mean = |f: fn(&ClassStats) -> f64| present.iter().map(|s| f(s)).sum::<f64>() / n;
    Ok(Scores {
        accuracy: correct as f64 / labels.len() as f64,
        precision: mean(|s| s.precision),
        recall: mean(|s| s.recall),
        f1: mean(|s| s.f1),
        auroc: auroc_ovr(probs, labels, classes)?,
        auprc: auprc_ovr(probs, labels, classes)?,
    })
}

/// `|val - test|` per metric. Both reports must share dataset, seed and ratio.
pub fn delta_report(val: &MetricReport, test: &MetricReport) -> Result<MetricReport> {
    if val.dataset != test.dataset || val.seed != test.seed || val.ratio != test.ratio {
        return Err(Error::Data(format!(
            "delta needs matching tags, got ({}, seed {}, {:?}) vs ({}, seed {}, {:?})",
            val.dataset, val.seed, val.ratio, test.dataset, test.seed, test.ratio
        )));
    }
    let (a, b) = (val.scores.to_array(), test.scores.to_array());
    let mut d = [0.0; 6];
    for i in 0..6 {
        d[i] = (a[i] - b[i]).abs();
    }
    Ok(MetricReport::new(&val.dataset, "delta", val.seed, val.ratio, Scores::from_array(d)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub dataset: String,
    pub split: String,
    pub ratio: Option<f64>,
    pub seeds: usize,
    pub mean: Scores,
    /// Population standard deviation.
    pub std: Scores,
}

/// Mean and population std per `(dataset, split, ratio)`, in first-seen order.
pub fn aggregate_seeds(reports: &[MetricReport]) -> Vec<Aggregate> {
    let mut groups: Vec<(&MetricReport, Vec<[f64; 6]>)> = Vec::new();
    for r in reports {
        match groups
            .iter_mut()
            .find(|(g, _)| g.dataset == r.dataset && g.split == r.split && g.ratio == r.ratio)
        {
            Some((_, rows)) => rows.push(r.scores.to_array()),
            None => groups.push((r, vec![r.scores.to_array()])),
        }
    }
    groups
        .into_iter()
        .map(|(g, rows)| {
            let n = rows.len() as f64;
            let mut mean = [0.0; 6];
            let mut std = [0.0; 6];
            for m in 0..6 {
                mean[m] = rows.iter().map(|r| r[m]).sum::<f64>() / n;
                std[m] = Float::sqrt(rows.iter().map(|r| (r[m] - mean[m]) * (r[m] - mean[m])).sum::<f64>() / n);
            }
            Aggregate {
                dataset: g.dataset.clone(),
                split: g.split.clone(),
                ratio: g.ratio,
                seeds: rows.len(),
                mean: Scores::from_array(mean),
                std: Scores::from_array(std),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
        labels.iter().map(|&y| (0..k).map(|j| if j == y { 1.0 } else { 0.0 }).collect()).collect()
    }

    #[test]
    fn perfect_predictor_scores_one() {
        let labels = [0, 1, 2, 1, 0];
        let s = evaluate(&onehot(&labels, 3), &labels, 3).unwrap();
        assert_eq!(s.to_array(), [1.0; 6]);
    }

    #[test]
    fn perfect_ranking_auroc() {
        let s = [0.9, 0.8, 0.3, 0.2];
        let p = [true, true, false, false];
        assert_eq!(auroc_binary(&s, &p), Some(1.0));
        assert_eq!(average_precision(&s, &p), Some(1.0));
        assert_eq!(auroc_binary(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auroc_binary(&[0.5, 0.5], &[true, true]), None);
    }

    #[test]
    fn tied_scores_average_precision() {
        // One threshold holding everything: recall 1 at precision 1/2.
        assert_eq!(average_precision(&[0.3, 0.3], &[true, false]), Some(0.5));
        // [pos 0.9] [neg 0.5] [pos 0.1]: 0.5 * 1 + 0.5 * 2/3.
        let ap = average_precision(&[0.9, 0.5, 0.1], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 1.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_skipped_and_zero_precision_counts() {
        // Class 2 never occurs; class 1 is never predicted.
        let probs = vec![vec![0.9, 0.1, 0.0], vec![0.8, 0.2, 0.0], vec![0.4, 0.3, 0.3]];
        let labels = [0, 1, 0];
        let s = evaluate(&probs, &labels, 3).unwrap();
        assert!((s.accuracy - 2.0 / 3.0).abs() < 1e-15);
        // Class 0: P = 2/3, R = 1. Class 1: P = R = 0.
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.recall - 0.5).abs() < 1e-15);
        assert!((s.f1 - 0.4).abs() < 1e-15);
    }

    #[test]
    fn single_class_auroc_falls_back_to_zero() {
        let probs = vec![vec![0.7, 0.3], vec![0.6, 0.4]];
        assert_eq!(auroc_ovr(&probs, &[0, 0], 2).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_rejects_bad_input() {
        assert!(evaluate(&[], &[], 2).is_err());
        assert!(evaluate(&[vec![0.5, 0.5]], &[2], 2).is_err());
        assert!(evaluate(&[vec![0.5]], &[0], 2).is_err());
    }

    #[test]
    fn deltas_and_aggregation() {
        let mk = |split: &str, seed, acc| {
            MetricReport::new("A", split, seed, None, Scores::from_array([acc; 6]))
        };
        let d = delta_report(&mk("val", 0, 0.95), &mk("test", 0, 0.90)).unwrap();
        assert!((d.scores.accuracy - 0.05).abs() < 1e-12);
        assert_eq!(delta_report(&mk("val", 0, 0.9), &mk("test", 0, 0.9)).unwrap().scores.to_array(), [0.0; 6]);
        assert!(delta_report(&mk("val", 0, 0.9), &mk("test", 1, 0.9)).is_err());

        let agg = aggregate_seeds(&[mk("test", 0, 0.8), mk("test", 1, 0.9), mk("val", 0, 0.7)]);
        assert_eq!(agg.len(), 2);
        assert!((agg[0].mean.accuracy - 0.85).abs() < 1e-15);
        assert!((agg[0].std.accuracy - 0.05).abs() < 1e-12);
        assert_eq!(agg[1].std.accuracy, 0.0);
    }
}
