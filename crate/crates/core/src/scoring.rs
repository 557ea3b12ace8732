//! Proper-scoring evaluation against simulation truth: the interval score,
//! weighted individual scores, score differences for the prior comparison,
//! criterion correlations, and bias/width summaries.

use crate::error::{Error, Result};
use crate::math::{mean, sd};
use crate::poststrat::{estimand_interval, EstimandDraws};

/// Interval score for a central (1 - alpha) prediction interval [l, u]
/// against the realized value x. Lower is better.
pub fn interval_score(l: f64, u: f64, x: f64, alpha: f64) -> Result<f64> {
    if l > u {
        return Err(Error::InvertedInterval { lower: l, upper: u });
    }
    assert!(alpha > 0.0 && alpha < 1.0);
    let mut s = u - l;
    if x < l {
        s += 2.0 / alpha * (l - x);
    }
    if x > u {
        s += 2.0 / alpha * (x - u);
    }
    Ok(s)
}

/// Weighted mean of per-unit scores; with raked weights this estimates the
/// population individual-level mean score from the sample.
pub fn weighted_individual_score(scores: &[f64], weights: &[f64]) -> f64 {
    assert_eq!(scores.len(), weights.len());
    let num: f64 = scores.iter().zip(weights).map(|(s, w)| s * w).sum();
    let den: f64 = weights.iter().sum();
    num / den
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiffKind {
    /// Interval score: lower is better, so the difference is negated.
    IntervalScore,
    /// LOO-based score: higher is better.
    Loo,
}

/// Signed score difference between the AR-prior model (`a`) and the
/// non-AR-prior model (`b`); positive always means the AR prior is better.
pub fn score_diff(a: f64, b: f64, kind: DiffKind) -> f64 {
    match kind {
        DiffKind::IntervalScore => -(a - b),
        DiffKind::Loo => a - b,
    }
}

/// Quadrant classification of a (diff_is, diff_loo) point: the two criteria
/// agree when the signs match.
pub fn diffs_agree(diff_is: f64, diff_loo: f64) -> bool {
    diff_is.signum() == diff_loo.signum()
}

/// Pearson correlation over (score_a, score_b) pairs pooled across models
/// and iterations.
pub fn criterion_correlation(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 3 {
        return Err(Error::InvalidSpec(format!(
            "correlation needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (ma, mb) = (mean(&a), mean(&b));
    let (sa, sb) = (sd(&a), sd(&b));
    if sa == 0.0 || sb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let cov = pairs.iter().map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (pairs.len() - 1) as f64;
    Ok(cov / (sa * sb))
}

/// Spearman rank correlation, used as a secondary per-iteration diagnostic.
pub fn spearman_correlation(pairs: &[(f64, f64)]) -> Result<f64> {
    let ra = ranks(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let rb = ranks(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let ranked: Vec<(f64, f64)> = ra.into_iter().zip(rb).collect();
    criterion_correlation(&ranked)
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Bias of the posterior mean and width of the central (1 - alpha) interval.
pub fn bias_and_width(d: &EstimandDraws, truth: f64, alpha: f64) -> (f64, f64) {
    let (l, u, m) = estimand_interval(d, alpha);
    (m - truth, u - l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poststrat::Scope;
    use approx::assert_relative_eq;
    use rand::Rng;

    #[test]
    fn interval_score_examples() {
        assert_relative_eq!(interval_score(0.2, 0.4, 0.3, 0.1).unwrap(), 0.2, epsilon = 1e-12);
        assert_relative_eq!(interval_score(0.2, 0.4, 0.5, 0.1).unwrap(), 2.2, epsilon = 1e-12);
        assert_eq!(interval_score(0.3, 0.3, 0.3, 0.1).unwrap(), 0.0);
        assert!(interval_score(0.5, 0.2, 0.3, 0.1).is_err());
    }

    #[test]
    fn interval_score_propriety_surrogate() {
        // widening an interval that already contains x strictly increases it
        let base = interval_score(0.2, 0.4, 0.3, 0.1).unwrap();
        assert!(interval_score(0.1, 0.4, 0.3, 0.1).unwrap() > base);
        assert!(interval_score(0.2, 0.5, 0.3, 0.1).unwrap() > base);
        // a miss costs exactly (2/alpha) * distance
        let d = 0.07;
        let miss = interval_score(0.2, 0.4, 0.4 + d, 0.1).unwrap();
        assert_relative_eq!(miss - base, 2.0 / 0.1 * d, epsilon = 1e-12);
    }

    #[test]
    fn weighted_score_examples() {
        let scores = [1.0, 2.0, 3.0, 4.0];
        assert_relative_eq!(weighted_individual_score(&scores, &[1.0; 4]), 2.5);
        assert_relative_eq!(
            weighted_individual_score(&scores, &[1e-9, 1e-9, 1e-9, 1.0]),
            4.0,
            epsilon = 1e-7
        );
    }

    #[test]
    fn score_diff_signs() {
        assert_eq!(score_diff(1.0, 1.0, DiffKind::IntervalScore), 0.0);
        assert_eq!(score_diff(1.0, 1.0, DiffKind::Loo), 0.0);
        // AR interval score 1.0 beats non-AR 1.5
        assert_relative_eq!(score_diff(1.0, 1.5, DiffKind::IntervalScore), 0.5);
        for kind in [DiffKind::IntervalScore, DiffKind::Loo] {
            let (a, b) = (0.3, -1.2);
            assert_relative_eq!(score_diff(a, b, kind), -score_diff(b, a, kind));
        }
        assert!(diffs_agree(0.5, 0.2) && diffs_agree(-0.5, -0.2));
        assert!(!diffs_agree(0.5, -0.2) && !diffs_agree(-0.5, 0.2));
    }

    #[test]
    fn correlation_examples() {
        let anti: Vec<(f64, f64)> = (0..20).map(|i| (i as f64, -2.0 * i as f64 + 3.0)).collect();
        assert_relative_eq!(criterion_correlation(&anti).unwrap(), -1.0, epsilon = 1e-12);

        let mut rng = crate::rng::stream(1, 0, "corr");
        let noise: Vec<(f64, f64)> =
            (0..10_000).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
        assert!(criterion_correlation(&noise).unwrap().abs() < 0.05);

        let degenerate = vec![(1.0, 2.0), (1.0, 3.0), (1.0, 4.0)];
        assert!(matches!(criterion_correlation(&degenerate), Err(Error::ZeroVariance)));
    }

    #[test]
    fn correlation_affine_invariance() {
        let mut rng = crate::rng::stream(2, 0, "corr");
        let pairs: Vec<(f64, f64)> =
            (0..200).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
        let r = criterion_correlation(&pairs).unwrap();
        let transformed: Vec<(f64, f64)> =
            pairs.iter().map(|&(a, b)| (3.0 * a + 1.0, 0.5 * b - 7.0)).collect();
        assert_relative_eq!(criterion_correlation(&transformed).unwrap(), r, epsilon = 1e-12);
    }

    #[test]
    fn spearman_on_monotone_transform() {
        let pairs: Vec<(f64, f64)> = (1..=30).map(|i| (i as f64, (i as f64).exp())).collect();
        assert_relative_eq!(spearman_correlation(&pairs).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bias_and_width_examples() {
        let d = EstimandDraws { values: vec![0.42; 40], scope: Scope::Population };
        let (bias, width) = bias_and_width(&d, 0.42, 0.1);
        assert_relative_eq!(bias, 0.0, epsilon = 1e-12);
        assert_eq!(width, 0.0);

        // draws uniform on [truth - 0.1, truth + 0.1]: bias 0, width 0.18
        // under the interpolation quantile rule (0.9 of the full range)
        let truth = 0.5;
        let n = 101;
        let values: Vec<f64> =
            (0..n).map(|i| truth - 0.1 + 0.2 * i as f64 / (n - 1) as f64).collect();
        let d = EstimandDraws { values, scope: Scope::Population };
        let (bias, width) = bias_and_width(&d, truth, 0.1);
        assert_relative_eq!(bias, 0.0, epsilon = 1e-12);
        assert_relative_eq!(width, 0.18, epsilon = 1e-12);
    }
}
