//! Best-split search for CART induction.
//!
//! Gini comparisons are done exactly in integer arithmetic: minimising the
//! weighted Gini impurity of a split is the same as maximising
//! `sum_k L_k^2 / n_L + sum_k R_k^2 / n_R`, a ratio of integers. Exact
//! comparison makes the documented tie-break (lowest feature, then lowest
//! threshold) independent of rounding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[default]
    Gini,
    Entropy,
}

/// `num / den`, compared exactly.
#[derive(Debug, Clone, Copy)]
struct Ratio {
    num: u128,
    den: u128,
}

impl Ratio {
    fn cmp(&self, other: &Ratio) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

fn sum_squares(counts: &[usize]) -> u128 {
    counts.iter().map(|&c| (c as u128) * (c as u128)).sum()
}

/// Purity score of a split: larger is better.
fn gini_score(sq_left: u128, n_left: usize, sq_right: u128, n_right: usize) -> Ratio {
    let (nl, nr) = (n_left as u128, n_right as u128);
    Ratio {
        num: sq_left * nr + sq_right * nl,
        den: nl * nr,
    }
}

pub fn gini_impurity(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    1.0 - sum_squares(counts) as f64 / (n as f64 * n as f64)
}

pub fn entropy(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            -p * p.log2()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    /// Impurity decrease relative to the unsplit node.
    pub gain: f64,
    pub n_left: usize,
}

enum Score {
    Gini(Ratio),
    Entropy(f64),
}

impl Score {
    fn better_than(&self, other: &Score) -> bool {
        match (self, other) {
            (Score::Gini(a), Score::Gini(b)) => a.cmp(b) == Ordering::Greater,
            // entropy scores are negated weighted entropies
            (Score::Entropy(a), Score::Entropy(b)) => *a > *b + 1e-12,
            _ => unreachable!("scores from one criterion"),
        }
    }
}

fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid >= hi {
        lo
    } else {
        mid
    }
}

/// Finds the split of `indices` with the lowest weighted impurity, requiring
/// a strict improvement over the unsplit node and at least
/// `min_samples_leaf` samples per side. Features with `allowed[f] == false`
/// are never considered.
pub fn best_split(
    rows: &[&[f64]],
    labels: &[usize],
    indices: &[usize],
    allowed: &[bool],
    num_classes: usize,
    min_samples_leaf: usize,
    criterion: Criterion,
) -> Option<SplitCandidate> {
    let n = indices.len();
    let min_leaf = min_samples_leaf.max(1);
    if n < 2 * min_leaf {
        return None;
    }
    let mut parent = vec![0usize; num_classes];
    for &i in indices {
        parent[labels[i]] += 1;
    }
    let parent_score = match criterion {
        Criterion::Gini => Score::Gini(Ratio {
            num: sum_squares(&parent),
            den: n as u128,
        }),
        Criterion::Entropy => Score::Entropy(-entropy(&parent)),
    };

    let mut best: Option<(Score, SplitCandidate)> = None;
    let mut column: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (feature, _) in allowed.iter().enumerate().filter(|(_, a)| **a) {
        column.clear();
        column.extend(indices.iter().map(|&i| (rows[i][feature], labels[i])));
        column.sort_by(|a, b| a.0.total_cmp(&b.0));
        if column[0].0 == column[n - 1].0 {
            continue;
        }
        let mut left = vec![0usize; num_classes];
        let mut right = parent.clone();
        let mut sq_left = 0u128;
        let mut sq_right = sum_squares(&parent);
        for pos in 0..n - 1 {
            let k = column[pos].1;
            sq_left += 2 * left[k] as u128 + 1;
            left[k] += 1;
            sq_right -= 2 * right[k] as u128 - 1;
            right[k] -= 1;

            let (lo, hi) = (column[pos].0, column[pos + 1].0);
            if lo == hi {
                continue;
            }
            let n_left = pos + 1;
            let n_right = n - n_left;
            if n_left < min_leaf || n_right < min_leaf {
                continue;
            }
            let score = match criterion {
                Criterion::Gini => Score::Gini(gini_score(sq_left, n_left, sq_right, n_right)),
                Criterion::Entropy => {
                    let w = n_left as f64 / n as f64;
                    Score::Entropy(-(w * entropy(&left) + (1.0 - w) * entropy(&right)))
                }
            };
            if !score.better_than(&parent_score) {
                continue;
            }
            if best.as_ref().is_none_or(|(b, _)| score.better_than(b)) {
                let gain = match (&score, &parent_score) {
                    (Score::Gini(s), Score::Gini(p)) => {
                        (s.num as f64 / s.den as f64 - p.num as f64 / p.den as f64) / n as f64
                    }
                    (Score::Entropy(s), Score::Entropy(p)) => s - p,
                    _ => unreachable!(),
                };
                best = Some((
                    score,
                    SplitCandidate {
                        feature,
                        threshold: midpoint(lo, hi),
                        gain,
                        n_left,
                    },
                ));
            }
        }
    }
    best.map(|(_, c)| c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_split_has_gain_one_half() {
        let rows: Vec<&[f64]> = vec![&[0.0], &[1.0]];
        let s = best_split(&rows, &[0, 1], &[0, 1], &[true], 2, 1, Criterion::Gini).unwrap();
        assert_eq!(s.feature, 0);
        assert_eq!(s.threshold, 0.5);
        assert!((s.gain - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ties_prefer_lowest_feature() {
        // both features separate the classes perfectly
        let rows: Vec<&[f64]> = vec![&[0.0, 0.0], &[1.0, 1.0]];
        let s = best_split(&rows, &[0, 1], &[0, 1], &[true, true], 2, 1, Criterion::Gini).unwrap();
        assert_eq!(s.feature, 0);
        let s = best_split(&rows, &[0, 1], &[0, 1], &[false, true], 2, 1, Criterion::Gini).unwrap();
        assert_eq!(s.feature, 1);
    }

    #[test]
    fn ties_prefer_lowest_threshold() {
        // labels A B A: splitting before or after B gives the same impurity
        let rows: Vec<&[f64]> = vec![&[0.0], &[1.0], &[2.0]];
        let s = best_split(&rows, &[0, 1, 0], &[0, 1, 2], &[true], 2, 1, Criterion::Gini).unwrap();
        assert_eq!(s.threshold, 0.5);
        let s = best_split(&rows, &[1, 0, 0], &[0, 1, 2], &[true], 2, 1, Criterion::Gini).unwrap();
        assert_eq!(s.threshold, 0.5);
        let s = best_split(&rows, &[0, 0, 1], &[0, 1, 2], &[true], 2, 1, Criterion::Gini).unwrap();
        assert_eq!(s.threshold, 1.5);
    }

    #[test]
    fn min_samples_leaf_is_respected() {
        let rows: Vec<&[f64]> = vec![&[0.0], &[1.0], &[1.0], &[1.0]];
        assert!(best_split(&rows, &[0, 1, 1, 1], &[0, 1, 2, 3], &[true], 2, 2, Criterion::Gini).is_none());
        assert!(best_split(&rows, &[0, 1, 1, 1], &[0, 1, 2, 3], &[true], 2, 1, Criterion::Gini).is_some());
    }

    #[test]
    fn constant_features_do_not_split() {
        let rows: Vec<&[f64]> = vec![&[1.0], &[1.0]];
        assert!(best_split(&rows, &[0, 1], &[0, 1], &[true], 2, 1, Criterion::Gini).is_none());
    }

    #[test]
    fn entropy_criterion_finds_separating_split() {
        let rows: Vec<&[f64]> = vec![&[0.0, 5.0], &[0.0, 1.0], &[1.0, 3.0], &[1.0, 2.0]];
        let s = best_split(
            &rows,
            &[0, 0, 1, 1],
            &[0, 1, 2, 3],
            &[true, true],
            2,
            1,
            Criterion::Entropy,
        )
        .unwrap();
        assert_eq!((s.feature, s.threshold), (0, 0.5));
        assert!((s.gain - 1.0).abs() < 1e-12);
    }

    #[test]
    fn impurity_helpers() {
        assert_eq!(gini_impurity(&[2, 2]), 0.5);
        assert_eq!(gini_impurity(&[4, 0]), 0.0);
        assert_eq!(entropy(&[1, 1]), 1.0);
    }
}
