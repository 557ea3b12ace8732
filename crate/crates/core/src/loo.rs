//! Leave-one-out predictive density estimation with Pareto-smoothed
//! importance sampling, plus the survey-weighted variant.
//!
//! For each held-out unit the importance ratios are `1 / p(y_i | draw)`,
//! i.e. the log ratios are the negated pointwise log-likelihoods. The upper
//! tail of the ratios is replaced by quantiles of a fitted generalized
//! Pareto distribution, which stabilizes the estimate and yields the
//! diagnostic shape estimate k-hat per unit.

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, quantile_sorted};

/// Shape threshold above which a unit's importance-sampling estimate is
/// considered unreliable.
pub const KHAT_WARN: f64 = 0.7;

/// Per-unit and aggregate output of PSIS-LOO.
#[derive(Debug, Clone)]
pub struct PsisResult {
    /// Pointwise expected log predictive density, one entry per unit.
    pub elpd_i: Vec<f64>,
    /// Pareto shape diagnostic per unit; NaN when the tail was degenerate.
    pub khat_i: Vec<f64>,
    /// Sum of `elpd_i`.
    pub elpd: f64,
    /// Fraction of units with k-hat above [`KHAT_WARN`].
    pub high_khat_fraction: f64,
}

/// Survey-weighted PSIS-LOO on both reporting scales.
#[derive(Debug, Clone)]
pub struct WtdPsisResult {
    /// `w_i * log f*_i` per unit, with weights normalized to sum to n.
    pub weighted_elpd_i: Vec<f64>,
    pub khat_i: Vec<f64>,
    /// Mean of the weighted pointwise terms, `(1/n) * sum_i w_i log f*_i`.
    pub elpd_mean: f64,
    /// Sum scale, `n * elpd_mean`, comparable to unweighted totals.
    pub elpd_sum: f64,
    pub high_khat_fraction: f64,
}

/// Maximum-likelihood generalized Pareto fit to exceedances, following the
/// Zhang–Stephens profile posterior with the sample-size-dependent shrinkage
/// of the shape toward 0.5 used by standard PSIS implementations.
///
/// Input must be positive exceedances (already shifted above the tail
/// cutoff). Returns `(k, sigma)`.
pub fn fit_gpd(exceedances: &[f64]) -> Result<(f64, f64)> {
    let n = exceedances.len();
    if n < 5 {
        return Err(Error::TailTooShort(n));
    }
    let mut x: Vec<f64> = exceedances.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let m = 30 + (n as f64).sqrt().floor() as usize;
    let x_star = x[(n as f64 / 4.0 + 0.5).floor() as usize - 1];
    let x_max = x[n - 1];

    // profile log-likelihood of theta = -k / sigma over a data-driven grid
    let profile = |theta: f64| -> f64 {
        let k: f64 = x.iter().map(|&v| (-theta * v).ln_1p()).sum::<f64>() / n as f64;
        n as f64 * ((-theta / k).ln() - k - 1.0)
    };

    let thetas: Vec<f64> = (1..=m)
        .map(|j| {
            1.0 / x_max + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / (3.0 * x_star)
        })
        .collect();
    let log_w: Vec<f64> = thetas.iter().map(|&t| profile(t)).collect();

    // posterior mean of theta under the implicit prior, via normalized weights
    let lse = log_sum_exp(&log_w);
    let theta_hat: f64 = thetas
        .iter()
        .zip(&log_w)
        .map(|(&t, &lw)| t * (lw - lse).exp())
        .sum();

    let mut k: f64 = x.iter().map(|&v| (-theta_hat * v).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    // weakly informative shrinkage of k toward 0.5
    k = k * n as f64 / (n as f64 + 10.0) + 0.5 * 10.0 / (n as f64 + 10.0);
    Ok((k, sigma))
}

/// Inverse CDF of the generalized Pareto distribution with location 0.
fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (1.0 - p).ln()
    } else {
        sigma * ((1.0 - p).powf(-k) - 1.0) / k
    }
}

/// Pareto-smooth one vector of log importance ratios in place; returns the
/// fitted k-hat (NaN when the tail is degenerate and smoothing is skipped).
///
/// The largest `M = ceil(min(0.2 S, 3 sqrt(S)))` ratios are replaced by
/// expected order statistics of the fitted generalized Pareto distribution,
/// then truncated at the raw maximum.
pub fn psis_smooth(log_ratios: &mut [f64]) -> f64 {
    let s = log_ratios.len();
    let m = ((0.2 * s as f64).min(3.0 * (s as f64).sqrt())).ceil() as usize;
    if m < 5 || s <= m {
        return f64::NAN;
    }

    // stabilize: work relative to the maximum
    let max_lr = log_ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max_lr.is_finite() {
        return f64::NAN;
    }

    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| log_ratios[a].partial_cmp(&log_ratios[b]).unwrap());
    let tail_idx = &order[s - m..];
    let cutoff = log_ratios[order[s - m - 1]] - max_lr;

    let exceedances: Vec<f64> = tail_idx
        .iter()
        .map(|&i| (log_ratios[i] - max_lr).exp() - cutoff.exp())
        .collect();
    // tail_idx is sorted, so the last exceedance is the largest
    if *exceedances.last().unwrap() <= 0.0 {
        return f64::NAN;
    }

    let (khat, sigma) = match fit_gpd(&exceedances) {
        Ok(fit) => fit,
        Err(_) => return f64::NAN,
    };
    if !khat.is_finite() {
        return f64::NAN;
    }

    for (j, &i) in tail_idx.iter().enumerate() {
        let p = (j as f64 + 0.5) / m as f64;
        let smoothed = (cutoff.exp() + gpd_quantile(p, khat, sigma)).ln() + max_lr;
        // never exceed the raw maximum
        log_ratios[i] = smoothed.min(max_lr);
    }
    khat
}

/// PSIS-LOO expected log predictive density from a draws-by-units pointwise
/// log-likelihood matrix (`loglik[s][i]`).
pub fn elpd_psis_loo(loglik: &[Vec<f64>]) -> Result<PsisResult> {
    let s = loglik.len();
    if s == 0 || loglik[0].is_empty() {
        return Err(Error::EmptySubset);
    }
    let n = loglik[0].len();
    let mut elpd_i = Vec::with_capacity(n);
    let mut khat_i = Vec::with_capacity(n);
    let mut lr = vec![0.0; s];
    let mut weighted = vec![0.0; s];
    for i in 0..n {
        for (sdx, row) in loglik.iter().enumerate() {
            lr[sdx] = -row[i];
        }
        let khat = psis_smooth(&mut lr);
        // elpd_i = log( sum_s v_s p(y_i|s) / sum_s v_s )
        //        = lse(log v_s + loglik_s) - lse(log v_s)
        for (sdx, row) in loglik.iter().enumerate() {
            weighted[sdx] = lr[sdx] + row[i];
        }
        elpd_i.push(log_sum_exp(&weighted) - log_sum_exp(&lr));
        khat_i.push(khat);
    }
    let elpd = elpd_i.iter().sum();
    let high = khat_i.iter().filter(|k| **k > KHAT_WARN).count() as f64 / n as f64;
    Ok(PsisResult { elpd_i, khat_i, elpd, high_khat_fraction: high })
}

/// Survey-weighted PSIS-LOO: pointwise terms are `w_i log f*_i` with the
/// weights rescaled to sum to n, reported on both mean and sum scales.
pub fn elpd_wtd_psis_loo(loglik: &[Vec<f64>], weights: &[f64]) -> Result<WtdPsisResult> {
    let base = elpd_psis_loo(loglik)?;
    let n = base.elpd_i.len();
    if weights.len() != n {
        return Err(Error::InvalidSpec(format!(
            "{} weights for {} units",
            weights.len(),
            n
        )));
    }
    if let Some(i) = weights.iter().position(|w| !(*w > 0.0)) {
        return Err(Error::NonpositiveWeight(i));
    }
    let total: f64 = weights.iter().sum();
    let weighted_elpd_i: Vec<f64> = base
        .elpd_i
        .iter()
        .zip(weights)
        .map(|(&e, &w)| w * n as f64 / total * e)
        .collect();
    let elpd_mean = weighted_elpd_i.iter().sum::<f64>() / n as f64;
    Ok(WtdPsisResult {
        weighted_elpd_i,
        khat_i: base.khat_i,
        elpd_mean,
        elpd_sum: elpd_mean * n as f64,
        high_khat_fraction: base.high_khat_fraction,
    })
}

/// Mean pointwise term over a subset of units, for small-area comparisons.
/// `pointwise` can hold either unweighted or weighted pointwise terms.
pub fn subset_mean_elpd(pointwise: &[f64], subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    Ok(subset.iter().map(|&i| pointwise[i]).sum::<f64>() / subset.len() as f64)
}

/// Brute-force leave-one-out oracle: refit the model once per held-out unit
/// and score it on the refit posterior. Returns pointwise elpd and a Monte
/// Carlo standard error per point.
///
/// `refit(i)` must return the pointwise log-likelihood matrix of a posterior
/// obtained without unit i, still evaluated on all original units.
pub fn exact_loo_oracle<F>(n: usize, mut refit: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnMut(usize) -> Result<Vec<Vec<f64>>>,
{
    let mut elpd = Vec::with_capacity(n);
    let mut mcse = Vec::with_capacity(n);
    for i in 0..n {
        let loglik = refit(i).map_err(|e| Error::LooRefit { fold: i, source: Box::new(e) })?;
        let s = loglik.len();
        let logs: Vec<f64> = loglik.iter().map(|row| row[i]).collect();
        // elpd_i = log mean_s p(y_i | draw_s)
        let lse = log_sum_exp(&logs);
        let point = lse - (s as f64).ln();
        // delta-method standard error of log mean(p): sd(p) / (mean(p) sqrt(S))
        let probs: Vec<f64> = logs.iter().map(|&l| (l - lse).exp()).collect();
        let mean_p = probs.iter().sum::<f64>() / s as f64;
        let var_p =
            probs.iter().map(|&p| (p - mean_p) * (p - mean_p)).sum::<f64>() / (s as f64 - 1.0);
        mcse.push((var_p / s as f64).sqrt() / mean_p);
        elpd.push(point);
    }
    Ok((elpd, mcse))
}

/// Empirical quantile helper for tests and reporting on sorted copies.
pub fn sorted_quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    quantile_sorted(&v, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn gpd_sample(k: f64, sigma: f64, n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| gpd_quantile(rng.gen::<f64>(), k, sigma)).collect()
    }

    #[test]
    fn gpd_fit_recovers_shape() {
        // average over seeds at a large tail size; the estimator is biased
        // toward 0.5 at small n by design, so use n large enough that the
        // shrinkage is negligible
        for &k_true in &[0.2, 0.5, 0.9] {
            let mut ks = Vec::new();
            for seed in 0..50 {
                let mut rng = stream(seed, 0, "gpd");
                let x = gpd_sample(k_true, 1.0, 10_000, &mut rng);
                let (k, sigma) = fit_gpd(&x).unwrap();
                assert!(sigma > 0.0);
                ks.push(k);
            }
            let mean_k = crate::math::mean(&ks);
            assert!(
                (mean_k - k_true).abs() < 0.05,
                "k_true {k_true}: mean estimate {mean_k}"
            );
        }
    }

    #[test]
    fn gpd_fit_exponential_data_gives_small_k() {
        let mut ks = Vec::new();
        for seed in 0..20 {
            let mut rng = stream(seed, 1, "gpd");
            let x: Vec<f64> = (0..10_000).map(|_| -rng.gen::<f64>().ln()).collect();
            ks.push(fit_gpd(&x).unwrap().0);
        }
        let mean_k = crate::math::mean(&ks);
        assert!(mean_k.abs() < 0.05, "mean k {mean_k}");
    }

    #[test]
    fn gpd_fit_rejects_short_tails() {
        assert!(matches!(fit_gpd(&[1.0, 2.0, 3.0]), Err(Error::TailTooShort(3))));
    }

    #[test]
    fn smoothing_shrinks_extreme_ratios_and_keeps_bulk() {
        let mut rng = stream(2, 0, "psis");
        // heavy-tailed log ratios: k = 0.9 Pareto => unreliable
        let mut lr: Vec<f64> =
            gpd_sample(0.9, 1.0, 4000, &mut rng).iter().map(|x| x.ln_1p()).collect();
        let raw = lr.clone();
        let raw_max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let khat = psis_smooth(&mut lr);
        assert!(khat > KHAT_WARN, "khat {khat}");
        let new_max = lr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(new_max <= raw_max + 1e-12);
        // bulk untouched
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[a].partial_cmp(&raw[b]).unwrap());
        for &i in &order[..raw.len() - 200] {
            assert_eq!(raw[i], lr[i]);
        }
    }

    #[test]
    fn smoothing_light_tail_khat_is_low() {
        let mut rng = stream(2, 1, "psis");
        let mut lr: Vec<f64> = (0..4000).map(|_| rng.gen::<f64>() * 0.1).collect();
        let khat = psis_smooth(&mut lr);
        assert!(khat < KHAT_WARN, "khat {khat}");
    }

    #[test]
    fn smoothing_is_shift_invariant() {
        let mut rng = stream(2, 2, "psis");
        let base: Vec<f64> = gpd_sample(0.4, 1.0, 2000, &mut rng);
        let mut a = base.clone();
        let mut b: Vec<f64> = base.iter().map(|x| x + 100.0).collect();
        let ka = psis_smooth(&mut a);
        let kb = psis_smooth(&mut b);
        assert!((ka - kb).abs() < 1e-8, "{ka} vs {kb}");
        for (x, y) in a.iter().zip(&b) {
            assert!((y - x - 100.0).abs() < 1e-8);
        }
    }

    #[test]
    fn degenerate_input_leaves_ratios_unchanged() {
        let mut lr = vec![0.7; 1000];
        let khat = psis_smooth(&mut lr);
        assert!(khat.is_nan());
        assert!(lr.iter().all(|&x| x == 0.7));

        let mut short = vec![0.1, 0.2, 0.3];
        assert!(psis_smooth(&mut short).is_nan());
    }

    #[test]
    fn loo_identities_on_flat_likelihood() {
        // constant pointwise likelihood: importance weights are uniform and
        // elpd_i equals the log-likelihood itself
        let s = 2000;
        let n = 10;
        let loglik = vec![vec![0.5f64.ln(); n]; s];
        let res = elpd_psis_loo(&loglik).unwrap();
        for &e in &res.elpd_i {
            approx::assert_relative_eq!(e, 0.5f64.ln(), epsilon = 1e-12);
        }
        approx::assert_relative_eq!(res.elpd, n as f64 * 0.5f64.ln(), epsilon = 1e-10);
        assert_eq!(res.high_khat_fraction, 0.0);
    }

    #[test]
    fn weighted_loo_scales_and_reduces_to_unweighted() {
        let mut rng = stream(3, 0, "wtd");
        let s = 1000;
        let n = 20;
        let loglik: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..n).map(|_| (0.2 + 0.6 * rng.gen::<f64>()).ln()).collect())
            .collect();
        let base = elpd_psis_loo(&loglik).unwrap();
        let unit = elpd_wtd_psis_loo(&loglik, &vec![1.0; n]).unwrap();
        approx::assert_relative_eq!(unit.elpd_sum, base.elpd, epsilon = 1e-10);

        // weights are invariant to overall rescaling
        let w: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
        let w10: Vec<f64> = w.iter().map(|x| x * 10.0).collect();
        let a = elpd_wtd_psis_loo(&loglik, &w).unwrap();
        let b = elpd_wtd_psis_loo(&loglik, &w10).unwrap();
        approx::assert_relative_eq!(a.elpd_mean, b.elpd_mean, epsilon = 1e-10);
        approx::assert_relative_eq!(a.elpd_sum, a.elpd_mean * n as f64, epsilon = 1e-12);

        assert!(matches!(
            elpd_wtd_psis_loo(&loglik, &vec![0.0; n]),
            Err(Error::NonpositiveWeight(0))
        ));
    }

    #[test]
    fn psis_matches_exact_refits_on_small_data() {
        use crate::inference::{pointwise_loglik, sample_posterior, ModelSpec, SamplerConfig};
        use crate::sim::Sample;

        // small single-variable dataset where n refits are affordable
        let n = 30;
        let truth = [0.2, 0.35, 0.5, 0.65, 0.8];
        let mut rng = stream(4, 0, "oracle");
        let mut x_level = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            let l = i % 5 + 1;
            x_level.push([1, l, 1, 1]);
            y.push(u8::from(rng.gen::<f64>() < truth[l - 1]));
        }
        let sample =
            Sample { indices: (0..n).collect(), y, x_level, weights: vec![1.0; n] };
        let mspec = ModelSpec::new(&[1], false).unwrap();
        let levels = [5, 5, 5, 5];
        let cfg = SamplerConfig {
            chains: 4,
            warmup: 500,
            draws: 2000,
            seed: 4,
            ..Default::default()
        };

        let full = sample_posterior(&sample, mspec.clone(), &levels, &cfg).unwrap();
        let loglik = pointwise_loglik(&full, &sample).unwrap();
        let psis = elpd_psis_loo(&loglik).unwrap();

        let (exact, mcse) = exact_loo_oracle(n, |i| {
            let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let reduced = Sample {
                indices: keep.iter().map(|&j| sample.indices[j]).collect(),
                y: keep.iter().map(|&j| sample.y[j]).collect(),
                x_level: keep.iter().map(|&j| sample.x_level[j]).collect(),
                weights: keep.iter().map(|&j| sample.weights[j]).collect(),
            };
            let refit_cfg = SamplerConfig { seed: 4 + i as u64 + 1, ..cfg.clone() };
            let draws = sample_posterior(&reduced, mspec.clone(), &levels, &refit_cfg)?;
            pointwise_loglik(&draws, &sample)
        })
        .unwrap();

        for i in 0..n {
            let diff = (psis.elpd_i[i] - exact[i]).abs();
            // both estimates carry Monte Carlo error of similar size
            let tol = 3.0 * mcse[i] * std::f64::consts::SQRT_2;
            assert!(
                diff < tol.max(0.01),
                "unit {i}: psis {} exact {} (mcse {})",
                psis.elpd_i[i],
                exact[i],
                mcse[i]
            );
        }
        let total_diff = (psis.elpd - exact.iter().sum::<f64>()).abs();
        assert!(total_diff < 0.5, "total diff {total_diff}");
        let pairs: Vec<(f64, f64)> =
            psis.elpd_i.iter().cloned().zip(exact.iter().cloned()).collect();
        let corr = crate::scoring::criterion_correlation(&pairs).unwrap();
        assert!(corr > 0.99, "corr {corr}");
    }

    #[test]
    fn oracle_propagates_refit_errors() {
        let err = exact_loo_oracle(3, |i| {
            if i == 1 {
                Err(Error::EmptySubset)
            } else {
                Ok(vec![vec![0.5f64.ln(); 3]; 10])
            }
        });
        assert!(matches!(err, Err(Error::LooRefit { fold: 1, .. })));
    }

    #[test]
    fn subset_mean_examples() {
        let pw = vec![1.0, 2.0, 3.0, 4.0];
        approx::assert_relative_eq!(subset_mean_elpd(&pw, &[1, 3]).unwrap(), 3.0);
        assert!(subset_mean_elpd(&pw, &[]).is_err());
    }
}
