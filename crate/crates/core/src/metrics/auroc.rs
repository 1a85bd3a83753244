use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scored sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub score: f64,
    pub label: u8,
}

/// Area under the ROC curve by the rank-sum statistic with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auroc", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Evaluation("NaN score".into()));
    }
    let p = labels.iter().filter(|&&l| l == 1).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(Error::Evaluation(format!(
            "AUROC needs both classes, got {p} positive and {n} negative"
        )));
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
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (p as f64, n as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of samples whose thresholded score matches the label; a score
/// equal to the threshold predicts positive.
pub fn accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("accuracy", &[scores.len()], &[labels.len()]));
    }
    if scores.is_empty() {
        return Err(Error::Evaluation("accuracy of an empty set".into()));
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| u8::from(s >= threshold) == l)
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn separable_and_tied() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.2, 0.9, 0.8], &[1, 1, 0, 0]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.5; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[1, 1]), Err(Error::Evaluation(_))));
    }

    #[test]
    fn accuracy_counts_threshold_ties_as_positive() {
        assert_eq!(accuracy(&[0.5, 0.49, 0.7], &[1, 0, 0], 0.5).unwrap(), 2.0 / 3.0);
    }

    fn score_set() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        proptest::collection::vec((0u8..8, 0u8..2), 2..40)
            .prop_map(|v| {
                let mut s: Vec<f64> = v.iter().map(|(q, _)| f64::from(*q) / 8.0).collect();
                let mut l: Vec<u8> = v.iter().map(|(_, l)| *l).collect();
                l[0] = 1;
                l[1] = 0;
                s[0] = s[0].min(1.0);
                (s, l)
            })
    }

    proptest! {
        #[test]
        fn invariant_under_increasing_transform((s, l) in score_set()) {
            let a = auroc(&s, &l).unwrap();
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
            prop_assert_eq!(a, auroc(&t, &l).unwrap());
        }

        #[test]
        fn symmetric_under_label_and_score_flip((s, l) in score_set()) {
            let a = auroc(&s, &l).unwrap();
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            let flip: Vec<u8> = l.iter().map(|x| 1 - x).collect();
            prop_assert!((a - auroc(&neg, &flip).unwrap()).abs() < 1e-15);
        }
    }
}
