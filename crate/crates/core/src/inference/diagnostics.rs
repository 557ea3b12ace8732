//! Convergence diagnostics: split R-hat and effective sample size.

#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub param_names: Vec<String>,
    pub rhat: Vec<f64>,
    pub ess: Vec<f64>,
    pub divergences: usize,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().cloned().fold(f64::NAN, f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.ess.iter().cloned().fold(f64::NAN, f64::min)
    }
}

/// `chains[c][s][d]`: draw s of chain c, flattened parameter d.
pub fn compute_diagnostics(
    param_names: &[String],
    chains: &[Vec<Vec<f64>>],
    divergences: usize,
) -> Diagnostics {
    let dims = param_names.len();
    let mut rhat = Vec::with_capacity(dims);
    let mut ess_v = Vec::with_capacity(dims);
    for d in 0..dims {
        let per_chain: Vec<Vec<f64>> =
            chains.iter().map(|c| c.iter().map(|q| q[d]).collect()).collect();
        rhat.push(split_rhat(&per_chain));
        ess_v.push(ess(&per_chain));
    }
    Diagnostics { param_names: param_names.to_vec(), rhat, ess: ess_v, divergences }
}

fn split_in_half(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut halves = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let mid = c.len() / 2;
        halves.push(c[..mid].to_vec());
        halves.push(c[mid..mid * 2].to_vec());
    }
    halves
}

/// Potential scale reduction factor on split chains.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves = split_in_half(chains);
    let m = halves.len() as f64;
    let n = halves[0].len() as f64;
    if n < 2.0 {
        return f64::NAN;
    }
    let chain_means: Vec<f64> = halves.iter().map(|c| crate::math::mean(c)).collect();
    let grand = crate::math::mean(&chain_means);
    let b = n / (m - 1.0) * chain_means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>();
    let w = crate::math::mean(&halves.iter().map(|c| crate::math::variance(c)).collect::<Vec<_>>());
    if w <= 0.0 {
        // constant chains
        return if b <= 1e-300 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Effective sample size across split chains, with Geyer's initial monotone
/// positive sequence truncation of the autocorrelation sum.
pub fn ess(chains: &[Vec<f64>]) -> f64 {
    let halves = split_in_half(chains);
    let m = halves.len() as f64;
    let n = halves[0].len();
    if n < 4 {
        return f64::NAN;
    }
    let total = m * n as f64;

    let chain_means: Vec<f64> = halves.iter().map(|c| crate::math::mean(c)).collect();
    let chain_vars: Vec<f64> = halves.iter().map(|c| crate::math::variance(c)).collect();
    let w = crate::math::mean(&chain_vars);
    let grand = crate::math::mean(&chain_means);
    let b_over_n = chain_means.iter().map(|x| (x - grand) * (x - grand)).sum::<f64>()
        / (m - 1.0).max(1.0);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if var_plus <= 0.0 {
        return f64::NAN;
    }

    // biased autocovariance at a given lag, averaged over chains
    let acov = |t: usize| -> f64 {
        let mut acc = 0.0;
        for (c, chain) in halves.iter().enumerate() {
            let mu = chain_means[c];
            let mut s = 0.0;
            for i in 0..n - t {
                s += (chain[i] - mu) * (chain[i + t] - mu);
            }
            acc += s / n as f64;
        }
        acc / m
    };

    let rho = |t: usize| 1.0 - (w - acov(t)) / var_plus;

    let mut tau = 1.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 1;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        // enforce monotone decrease of the paired sums
        let pair = pair.min(prev_pair);
        prev_pair = pair;
        tau += 2.0 * pair;
        t += 2;
    }
    total / tau
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn iid_chains_look_converged() {
        let mut rng = crate::rng::stream(0, 0, "diag");
        let chains: Vec<Vec<f64>> =
            (0..4).map(|_| (0..1000).map(|_| rng.gen::<f64>()).collect()).collect();
        let r = split_rhat(&chains);
        assert!((r - 1.0).abs() < 0.02, "rhat {r}");
        let e = ess(&chains);
        assert!(e > 2000.0, "ess {e}");
    }

    #[test]
    fn shifted_chain_is_flagged() {
        let mut rng = crate::rng::stream(0, 1, "diag");
        let mut chains: Vec<Vec<f64>> =
            (0..4).map(|_| (0..500).map(|_| rng.gen::<f64>()).collect()).collect();
        for v in chains[0].iter_mut() {
            *v += 5.0;
        }
        assert!(split_rhat(&chains) > 1.5);
    }

    #[test]
    fn autocorrelated_chain_has_low_ess() {
        let mut rng = crate::rng::stream(0, 2, "diag");
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let mut x = 0.0;
                (0..1000)
                    .map(|_| {
                        x = 0.95 * x + rng.gen::<f64>() - 0.5;
                        x
                    })
                    .collect()
            })
            .collect();
        let e = ess(&chains);
        assert!(e < 500.0, "ess {e}");
    }
}
