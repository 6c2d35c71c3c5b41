//! Exact one-sided Wilcoxon signed-rank test for paired samples.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedRankResult {
    /// Pairs with a non-zero difference.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// `P(W+ >= observed)` under the symmetric null.
    pub p_value: f64,
}

/// Tests whether `a` tends to exceed `b`. Zero differences are dropped and
/// tied magnitudes share their average rank; the null distribution is
/// enumerated exactly over sign assignments.
pub fn wilcoxon_greater(a: &[f64], b: &[f64]) -> SignedRankResult {
    assert_eq!(a.len(), b.len(), "paired samples differ in length");
    let mut diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    diffs.sort_by(|x, y| x.abs().total_cmp(&y.abs()));
    let n = diffs.len();
    if n == 0 {
        return SignedRankResult {
            n,
            w_plus: 0.0,
            p_value: 1.0,
        };
    }
    // Doubled ranks stay integral under averaging.
    let mut ranks2 = vec![0usize; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        for r in &mut ranks2[i..=j] {
            *r = i + j + 2;
        }
        i = j + 1;
    }
    let observed: usize = ranks2.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let total: usize = ranks2.iter().sum();
    let mut counts = vec![0f64; total + 1];
    counts[0] = 1.0;
    for &r in &ranks2 {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let tail: f64 = counts[observed..].iter().sum();
    SignedRankResult {
        n,
        w_plus: observed as f64 / 2.0,
        p_value: tail / 2f64.powi(n as i32),
    }
}
