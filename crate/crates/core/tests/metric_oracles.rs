//! The metrics against brute-force reference implementations on random
//! score tables with heavy ties.

use proptest::prelude::*;

use formed_core::metrics::{auroc_binary, average_precision, evaluate};

const TOL: f64 = 1e-9;

/// Pairwise AUROC: wins count 1, ties count 1/2.
fn auroc_pairs(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0usize);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1;
                num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    (pairs > 0).then(|| num / pairs as f64)
}

/// Step-sum AP: walk the distinct thresholds from high to low and count
/// everything at or above each one afresh.
fn ap_thresholds(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut ap, mut prev_r) = (0.0, 0.0);
    for t in thresholds {
        let above: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
        let tp = above.iter().filter(|&&i| positive[i]).count() as f64;
        let r = tp / n_pos as f64;
        ap += (r - prev_r) * tp / above.len() as f64;
        prev_r = r;
    }
    Some(ap)
}

struct Reference {
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    auroc: f64,
    auprc: f64,
}

fn reference(probs: &[Vec<f64>], labels: &[usize], k: usize) -> Reference {
    // First index of the maximum breaks ties.
    let pred: Vec<usize> = probs
        .iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            r.iter().position(|&v| v == m).unwrap()
        })
        .collect();
    let mut confusion = vec![vec![0usize; k]; k];
    for (&y, &p) in labels.iter().zip(&pred) {
        confusion[y][p] += 1;
    }
    let n = labels.len() as f64;
    let accuracy = (0..k).map(|c| confusion[c][c]).sum::<usize>() as f64 / n;
    let present: Vec<usize> = (0..k).filter(|&c| confusion[c].iter().sum::<usize>() > 0).collect();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for &c in &present {
        let tp = confusion[c][c] as f64;
        let col: usize = (0..k).map(|r| confusion[r][c]).sum();
        let row: usize = confusion[c].iter().sum();
        let p = if col == 0 { 0.0 } else { tp / col as f64 };
        let r = tp / row as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        p_sum += p;
        r_sum += r;
        f_sum += f;
    }
    let m = present.len() as f64;
    let ovr = |c: usize| -> (Vec<f64>, Vec<bool>) {
        (probs.iter().map(|r| r[c]).collect(), labels.iter().map(|&y| y == c).collect())
    };
    let aurocs: Vec<f64> = (0..k).filter_map(|c| { let (s, p) = ovr(c); auroc_pairs(&s, &p) }).collect();
    let aps: Vec<f64> = (0..k).filter_map(|c| { let (s, p) = ovr(c); ap_thresholds(&s, &p) }).collect();
    Reference {
        accuracy,
        precision: p_sum / m,
        recall: r_sum / m,
        f1: f_sum / m,
        auroc: if aurocs.is_empty() { 0.0 } else { aurocs.iter().sum::<f64>() / aurocs.len() as f64 },
        auprc: aps.iter().sum::<f64>() / aps.len() as f64,
    }
}

/// `n <= 200` rows over `K <= 5` classes; scores drawn from a few levels so
/// ties are common.
fn table() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, usize)> {
    (2usize..=5, 1usize..=200, 2u32..=8).prop_flat_map(|(k, n, levels)| {
        (
            prop::collection::vec(prop::collection::vec(0..levels, k), n),
            prop::collection::vec(0..k, n),
        )
            .prop_map(move |(raw, labels)| {
                let probs = raw.into_iter().map(|r| r.into_iter().map(|v| v as f64 / levels as f64).collect()).collect();
                (probs, labels, k)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn evaluate_matches_reference((probs, labels, k) in table()) {
        let got = evaluate(&probs, &labels, k).unwrap();
        let want = reference(&probs, &labels, k);
        for (name, g, w) in [
            ("accuracy", got.accuracy, want.accuracy),
            ("precision", got.precision, want.precision),
            ("recall", got.recall, want.recall),
            ("f1", got.f1, want.f1),
            ("auroc", got.auroc, want.auroc),
            ("auprc", got.auprc, want.auprc),
        ] {
            prop_assert!((g - w).abs() <= TOL, "{}: {} vs {}", name, g, w);
        }
    }

    #[test]
    fn binary_curves_match_reference(
        scores in prop::collection::vec(0u8..6, 1..=200),
        flags in prop::collection::vec(any::<bool>(), 200),
    ) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64 * 0.2).collect();
        let p = &flags[..s.len()];
        let (a, b) = (auroc_binary(&s, p), auroc_pairs(&s, p));
        prop_assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            prop_assert!((a - b).abs() <= TOL);
        }
        let (a, b) = (average_precision(&s, p), ap_thresholds(&s, p));
        prop_assert_eq!(a.is_some(), b.is_some());
        if let (Some(a), Some(b)) = (a, b) {
            prop_assert!((a - b).abs() <= TOL);
        }
    }
}

#[test]
fn hand_checked_values() {
    // Positives at 0.9 and 0.5, negatives at 0.5 and 0.1: 3.5 of 4 pairs.
    let s = [0.9, 0.5, 0.5, 0.1];
    let p = [true, true, false, false];
    assert_eq!(auroc_binary(&s, &p), Some(0.875));
    // Thresholds 0.9 (R=1/2, P=1) then 0.5 (R=1, P=2/3).
    assert!((average_precision(&s, &p).unwrap() - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    assert_eq!(auroc_binary(&s, &[true; 4]), None);
}
