//! Voxel-level ROC AUC through the Mann–Whitney statistic.

use crate::scalar::Scalar;

use super::{MetricValue, Undefined};

/// Keeps `m` evenly strided entries (or all of them when there are fewer).
pub(crate) fn stride_subsample<T: Copy>(values: Vec<T>, m: usize) -> Vec<T> {
    let n = values.len();
    if m == 0 || n <= m {
        return values;
    }
    (0..m).map(|j| values[(j as u128 * n as u128 / m as u128) as usize]).collect()
}

/// Twice the Mann–Whitney U: pairs with `pos > neg` count 2, ties count 1.
pub(crate) fn doubled_u<T: Scalar>(positives: &[T], mut negatives: Vec<T>) -> u128 {
    negatives.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    positives
        .iter()
        .map(|s| {
            let below = negatives.partition_point(|n| n < s);
            let not_above = negatives.partition_point(|n| n <= s);
            2 * below as u128 + (not_above - below) as u128
        })
        .sum()
}

/// AUC of positive versus negative scores with ties counted as one half.
pub fn auc_from_scores<T: Scalar>(positives: &[T], negatives: Vec<T>) -> MetricValue {
    if positives.is_empty() {
        return MetricValue::Undefined(Undefined::NoPositives);
    }
    if negatives.is_empty() {
        return MetricValue::Undefined(Undefined::NoNegatives);
    }
    let pairs = positives.len() as u128 * negatives.len() as u128;
    let u2 = doubled_u(positives, negatives);
    MetricValue::Defined(u2 as f64 / (2 * pairs) as f64)
}

/// Splits `scores` into positives and negatives by `is_positive`, keeping only
/// voxels accepted by `in_region`, then optionally subsamples each side.
pub(crate) fn split_scores<T: Scalar>(
    scores: &[T],
    is_positive: impl Fn(usize) -> bool,
    in_region: impl Fn(usize) -> bool,
    subsample: Option<usize>,
) -> (Vec<T>, Vec<T>) {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, &s) in scores.iter().enumerate() {
        if in_region(i) {
            if is_positive(i) {
                pos.push(s);
            } else {
                neg.push(s);
            }
        }
    }
    match subsample {
        Some(m) => (stride_subsample(pos, m), stride_subsample(neg, m)),
        None => (pos, neg),
    }
}
