//! Model definition: log joint density, analytic gradient, and posterior
//! predictive quantities.
//!
//! The sampler works on an unconstrained vector `q` laid out as
//! `[beta0?] ++ concat_k [z_1..z_L, log_sigma, (u_rho)?]` where
//! `alpha = f(z, sigma, rho)` is the non-centered reparameterization,
//! `sigma = exp(log_sigma)` and `rho = tanh(u_rho)`.
//!
//! The likelihood is grouped by distinct level combinations of the included
//! variables: units in the same combination share a linear predictor, so the
//! Bernoulli log-likelihood reduces to per-combination sufficient statistics.

use crate::error::{Error, Result};
use crate::math::{inv_logit, log_half_normal_pdf, log_normal_pdf};
use crate::poststrat::PoststratTable;
use crate::sim::{Sample, NUM_VARS};
use std::collections::HashMap;
use std::io::Write;

const INTERCEPT_PRIOR_SD: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    ExchangeableNormal,
    Ar1,
}

/// Which variables a model includes and how each is regularized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    /// 0-based variable indices, sorted, non-empty.
    pub included_vars: Vec<usize>,
    pub has_intercept: bool,
    /// Parallel to `included_vars`.
    pub priors: Vec<PriorKind>,
}

impl ModelSpec {
    pub fn new(vars: &[usize], has_intercept: bool) -> Result<Self> {
        let mut included: Vec<usize> = vars.to_vec();
        included.sort_unstable();
        included.dedup();
        if included.is_empty() {
            return Err(Error::InvalidSpec("model must include at least one variable".into()));
        }
        if included.iter().any(|&v| v >= NUM_VARS) {
            return Err(Error::InvalidSpec("variable index out of range".into()));
        }
        let priors = vec![PriorKind::ExchangeableNormal; included.len()];
        Ok(ModelSpec { included_vars: included, has_intercept, priors })
    }

    /// Switch one included variable to the AR prior.
    pub fn with_ar1_on(mut self, var: usize) -> Result<Self> {
        match self.included_vars.iter().position(|&v| v == var) {
            Some(slot) => {
                self.priors[slot] = PriorKind::Ar1;
                Ok(self)
            }
            None => Err(Error::InvalidSpec(format!("variable {} not in model", var + 1))),
        }
    }

    pub fn label(&self) -> String {
        let vars: Vec<String> = self
            .included_vars
            .iter()
            .zip(&self.priors)
            .map(|(v, p)| match p {
                PriorKind::ExchangeableNormal => format!("x{}", v + 1),
                PriorKind::Ar1 => format!("x{}ar", v + 1),
            })
            .collect();
        vars.join("_")
    }
}

/// One posterior draw on the constrained scale.
#[derive(Debug, Clone)]
pub struct Params {
    pub beta0: Option<f64>,
    /// Per included variable, the level coefficients.
    pub alpha: Vec<Vec<f64>>,
    pub sigma: Vec<f64>,
    /// `Some` only for AR-prior variables.
    pub rho: Vec<Option<f64>>,
}

impl Params {
    pub fn validate(&self) -> Result<()> {
        if self.sigma.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::ConstraintViolation("sigma must be positive".into()));
        }
        if self.rho.iter().flatten().any(|r| r.abs() >= 1.0) {
            return Err(Error::ConstraintViolation("|rho| must be below 1".into()));
        }
        Ok(())
    }
}

/// Sufficient statistics of a sample for one model: units grouped by their
/// level combination on the included variables.
#[derive(Debug, Clone)]
pub struct GroupedData {
    /// Per combination, the 1-based level of each included variable.
    pub combo_levels: Vec<Vec<usize>>,
    pub trials: Vec<f64>,
    pub successes: Vec<f64>,
    /// Combination index of each sample unit.
    pub unit_combo: Vec<usize>,
    /// Outcome of each sample unit.
    pub unit_y: Vec<u8>,
}

impl GroupedData {
    pub fn from_sample(sample: &Sample, spec: &ModelSpec) -> GroupedData {
        let mut index: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut combo_levels = Vec::new();
        let mut trials = Vec::new();
        let mut successes = Vec::new();
        let mut unit_combo = Vec::with_capacity(sample.len());
        for i in 0..sample.len() {
            let key: Vec<usize> =
                spec.included_vars.iter().map(|&v| sample.x_level[i][v]).collect();
            let slot = *index.entry(key.clone()).or_insert_with(|| {
                combo_levels.push(key);
                trials.push(0.0);
                successes.push(0.0);
                trials.len() - 1
            });
            trials[slot] += 1.0;
            successes[slot] += f64::from(sample.y[i]);
            unit_combo.push(slot);
        }
        // canonical combo order: results do not depend on unit order
        let mut order: Vec<usize> = (0..combo_levels.len()).collect();
        order.sort_by(|&a, &b| combo_levels[a].cmp(&combo_levels[b]));
        let mut rank = vec![0usize; order.len()];
        for (new, &old) in order.iter().enumerate() {
            rank[old] = new;
        }
        GroupedData {
            combo_levels: order.iter().map(|&o| combo_levels[o].clone()).collect(),
            trials: order.iter().map(|&o| trials[o]).collect(),
            successes: order.iter().map(|&o| successes[o]).collect(),
            unit_combo: unit_combo.into_iter().map(|c| rank[c]).collect(),
            unit_y: sample.y.clone(),
        }
    }
}

/// A model bound to data, ready for sampling.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    /// Number of levels of each included variable.
    pub levels: Vec<usize>,
    pub data: GroupedData,
}

/// `(log(1 + exp(eta)), inv_logit(eta))` with a single exponential.
#[inline]
fn bernoulli_logit_terms(eta: f64) -> (f64, f64) {
    if eta >= 0.0 {
        let e = (-eta).exp();
        (eta + e.ln_1p(), 1.0 / (1.0 + e))
    } else {
        let e = eta.exp();
        (e.ln_1p(), e / (1.0 + e))
    }
}

impl Model {
    pub fn new(sample: &Sample, spec: ModelSpec, levels_per_var: &[usize; NUM_VARS]) -> Result<Model> {
        let levels: Vec<usize> = spec.included_vars.iter().map(|&v| levels_per_var[v]).collect();
        for i in 0..sample.len() {
            for (slot, &v) in spec.included_vars.iter().enumerate() {
                let l = sample.x_level[i][v];
                if l < 1 || l > levels[slot] {
                    return Err(Error::LevelOutOfRange { var: v + 1, level: l });
                }
            }
        }
        let data = GroupedData::from_sample(sample, &spec);
        Ok(Model { spec, levels, data })
    }

    /// Dimension of the unconstrained parameter vector.
    pub fn dim(&self) -> usize {
        let mut d = usize::from(self.spec.has_intercept);
        for (slot, &l) in self.levels.iter().enumerate() {
            d += l + 1 + usize::from(self.spec.priors[slot] == PriorKind::Ar1);
        }
        d
    }

    /// Flattened parameter names on the constrained scale, matching
    /// [`Model::constrain`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.spec.has_intercept {
            names.push("beta0".to_string());
        }
        for (slot, &v) in self.spec.included_vars.iter().enumerate() {
            for l in 1..=self.levels[slot] {
                names.push(format!("alpha_x{}[{}]", v + 1, l));
            }
            names.push(format!("sigma_x{}", v + 1));
            if self.spec.priors[slot] == PriorKind::Ar1 {
                names.push(format!("rho_x{}", v + 1));
            }
        }
        names
    }

    /// Map an unconstrained vector to constrained parameters.
    pub fn constrain(&self, q: &[f64]) -> Params {
        let mut pos = 0;
        let beta0 = if self.spec.has_intercept {
            pos += 1;
            Some(q[0])
        } else {
            None
        };
        let mut alpha = Vec::with_capacity(self.levels.len());
        let mut sigma = Vec::with_capacity(self.levels.len());
        let mut rho = Vec::with_capacity(self.levels.len());
        for (slot, &l) in self.levels.iter().enumerate() {
            let z = &q[pos..pos + l];
            pos += l;
            let s = q[pos].exp();
            pos += 1;
            let r = if self.spec.priors[slot] == PriorKind::Ar1 {
                let r = q[pos].tanh();
                pos += 1;
                Some(r)
            } else {
                None
            };
            alpha.push(alpha_from_noncentered(z, s, r));
            sigma.push(s);
            rho.push(r);
        }
        Params { beta0, alpha, sigma, rho }
    }

    /// Flatten a constrained draw in `param_names` order.
    pub fn flatten(&self, p: &Params) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(b) = p.beta0 {
            out.push(b);
        }
        for slot in 0..self.levels.len() {
            out.extend_from_slice(&p.alpha[slot]);
            out.push(p.sigma[slot]);
            if let Some(r) = p.rho[slot] {
                out.push(r);
            }
        }
        out
    }

    /// Log posterior density and its gradient in unconstrained space.
    pub fn logp_grad(&self, q: &[f64]) -> (f64, Vec<f64>) {
        debug_assert_eq!(q.len(), self.dim());
        let n_vars = self.levels.len();
        let mut grad = vec![0.0; q.len()];
        let mut logp = 0.0;

        // decode blocks
        let mut pos = 0;
        let beta0 = if self.spec.has_intercept {
            pos += 1;
            q[0]
        } else {
            0.0
        };
        let mut z_start = Vec::with_capacity(n_vars);
        let mut ls_pos = Vec::with_capacity(n_vars);
        let mut rho_pos: Vec<Option<usize>> = Vec::with_capacity(n_vars);
        let mut sigma = Vec::with_capacity(n_vars);
        let mut rho = Vec::with_capacity(n_vars);
        let mut alpha: Vec<Vec<f64>> = Vec::with_capacity(n_vars);
        for (slot, &l) in self.levels.iter().enumerate() {
            z_start.push(pos);
            let z = &q[pos..pos + l];
            pos += l;
            ls_pos.push(pos);
            let s = q[pos].exp();
            pos += 1;
            let r = if self.spec.priors[slot] == PriorKind::Ar1 {
                rho_pos.push(Some(pos));
                let r = q[pos].tanh();
                pos += 1;
                Some(r)
            } else {
                rho_pos.push(None);
                None
            };
            alpha.push(alpha_from_noncentered(z, s, r));
            sigma.push(s);
            rho.push(r);
        }

        // likelihood over grouped combinations
        let mut g_alpha: Vec<Vec<f64>> = self.levels.iter().map(|&l| vec![0.0; l]).collect();
        let mut g_beta0 = 0.0;
        for c in 0..self.data.combo_levels.len() {
            let mut eta = beta0;
            for slot in 0..n_vars {
                eta += alpha[slot][self.data.combo_levels[c][slot] - 1];
            }
            let (log1pexp, p) = bernoulli_logit_terms(eta);
            let (m, s) = (self.data.trials[c], self.data.successes[c]);
            logp += s * eta - m * log1pexp;
            let g_eta = s - m * p;
            g_beta0 += g_eta;
            for slot in 0..n_vars {
                g_alpha[slot][self.data.combo_levels[c][slot] - 1] += g_eta;
            }
        }

        // chain rule back to the non-centered parameters, plus priors
        for slot in 0..n_vars {
            let l = self.levels[slot];
            let z = &q[z_start[slot]..z_start[slot] + l];
            let s = sigma[slot];
            let ga = &g_alpha[slot];
            match rho[slot] {
                None => {
                    let mut g_ls = 0.0;
                    for i in 0..l {
                        grad[z_start[slot] + i] += ga[i] * s;
                        g_ls += ga[i] * z[i] * s; // d alpha / d log_sigma = alpha
                    }
                    grad[ls_pos[slot]] += g_ls;
                }
                Some(r) => {
                    let scale0 = 1.0 / (1.0 - r * r).sqrt();
                    // adjoint of the AR recursion: c_l = g_l + rho * c_{l+1}
                    let mut c = vec![0.0; l];
                    c[l - 1] = ga[l - 1];
                    for i in (0..l - 1).rev() {
                        c[i] = ga[i] + r * c[i + 1];
                    }
                    grad[z_start[slot]] += c[0] * s * scale0;
                    let mut g_sigma = c[0] * z[0] * scale0;
                    for i in 1..l {
                        grad[z_start[slot] + i] += c[i] * s;
                        g_sigma += c[i] * z[i];
                    }
                    grad[ls_pos[slot]] += g_sigma * s;

                    // forward sensitivity of alpha to rho
                    let mut t = s * z[0] * r * scale0.powi(3);
                    let mut g_rho = ga[0] * t;
                    for i in 1..l {
                        t = alpha[slot][i - 1] + r * t;
                        g_rho += ga[i] * t;
                    }
                    // d rho / d u = 1 - rho^2; rho prior uniform(-1,1) with
                    // tanh Jacobian contributes log(1 - rho^2)
                    grad[rho_pos[slot].unwrap()] += g_rho * (1.0 - r * r) - 2.0 * r;
                    logp += (1.0 - r * r).ln() - std::f64::consts::LN_2;
                }
            }

            // standard normal prior on z
            for i in 0..l {
                logp += -0.5 * z[i] * z[i];
                grad[z_start[slot] + i] += -z[i];
            }
            // half-normal(0,1) prior on sigma, with log-sigma Jacobian
            logp += log_half_normal_pdf(s, 1.0) + s.ln();
            grad[ls_pos[slot]] += -s * s + 1.0;
        }

        if self.spec.has_intercept {
            logp += log_normal_pdf(beta0, 0.0, INTERCEPT_PRIOR_SD);
            grad[0] = g_beta0 - beta0 / (INTERCEPT_PRIOR_SD * INTERCEPT_PRIOR_SD);
        }

        (logp, grad)
    }
}

/// Non-centered map from scale-free draws to level coefficients.
pub fn alpha_from_noncentered(z: &[f64], sigma: f64, rho: Option<f64>) -> Vec<f64> {
    match rho {
        None => z.iter().map(|&zi| sigma * zi).collect(),
        Some(r) => {
            let mut alpha = Vec::with_capacity(z.len());
            let mut prev = sigma / (1.0 - r * r).sqrt() * z[0];
            alpha.push(prev);
            for &zi in &z[1..] {
                prev = r * prev + sigma * zi;
                alpha.push(prev);
            }
            alpha
        }
    }
}

/// Per-variable prior log density on the constrained scale: the level
/// coefficients given (sigma, rho) plus the half-normal(0,1) prior on sigma.
/// The AR form collapses to the exchangeable form at rho = 0.
pub fn var_prior_log_density(alpha: &[f64], sigma: f64, rho: Option<f64>) -> f64 {
    let mut lp = log_half_normal_pdf(sigma, 1.0);
    match rho {
        None => {
            for &a in alpha {
                lp += log_normal_pdf(a, 0.0, sigma);
            }
        }
        Some(r) => {
            lp += log_normal_pdf(alpha[0], 0.0, sigma / (1.0 - r * r).sqrt());
            for w in alpha.windows(2) {
                lp += log_normal_pdf(w[1], r * w[0], sigma);
            }
        }
    }
    lp
}

/// Log joint density of constrained parameters and the sample: Bernoulli
/// logit log-likelihood plus all priors, with the log-Jacobian terms of the
/// sigma and rho transforms.
pub fn log_joint(p: &Params, sample: &Sample, spec: &ModelSpec) -> Result<f64> {
    p.validate()?;
    let data = GroupedData::from_sample(sample, spec);
    let beta0 = p.beta0.unwrap_or(0.0);
    let mut lp = 0.0;
    for c in 0..data.combo_levels.len() {
        let mut eta = beta0;
        for slot in 0..spec.included_vars.len() {
            eta += p.alpha[slot][data.combo_levels[c][slot] - 1];
        }
        let (log1pexp, _) = bernoulli_logit_terms(eta);
        lp += data.successes[c] * eta - data.trials[c] * log1pexp;
    }
    for slot in 0..spec.included_vars.len() {
        lp += var_prior_log_density(&p.alpha[slot], p.sigma[slot], p.rho[slot]);
        lp += p.sigma[slot].ln(); // log-sigma Jacobian
        if let Some(r) = p.rho[slot] {
            lp += (1.0 - r * r).ln() - std::f64::consts::LN_2; // tanh Jacobian + uniform prior
        }
    }
    if spec.has_intercept {
        lp += log_normal_pdf(beta0, 0.0, INTERCEPT_PRIOR_SD);
    }
    Ok(lp)
}

/// Posterior draws with sampler diagnostics.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub spec: ModelSpec,
    /// Number of levels of each included variable.
    pub levels: Vec<usize>,
    /// Post-warmup draws, all chains concatenated in chain order.
    pub params: Vec<Params>,
    pub diagnostics: super::Diagnostics,
}

impl PosteriorDraws {
    pub fn num_draws(&self) -> usize {
        self.params.len()
    }

    /// Linear predictor of one draw for a full 4-variable level combination.
    fn eta(&self, p: &Params, levels: &[usize; NUM_VARS]) -> Result<f64> {
        let mut eta = p.beta0.unwrap_or(0.0);
        for (slot, &v) in self.spec.included_vars.iter().enumerate() {
            let l = levels[v];
            if l < 1 || l > self.levels[slot] {
                return Err(Error::LevelOutOfRange { var: v + 1, level: l });
            }
            eta += p.alpha[slot][l - 1];
        }
        Ok(eta)
    }

    /// Predicted outcome probability of every sample unit under every draw;
    /// entry (s, i).
    pub fn unit_probability_draws(&self, sample: &Sample) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let row = sample
                .x_level
                .iter()
                .map(|lv| self.eta(p, lv).map(inv_logit))
                .collect::<Result<Vec<f64>>>()?;
            out.push(row);
        }
        Ok(out)
    }

    /// One row per draw, one column per parameter.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let model = Model {
            spec: self.spec.clone(),
            levels: self.levels.clone(),
            data: GroupedData {
                combo_levels: vec![],
                trials: vec![],
                successes: vec![],
                unit_combo: vec![],
                unit_y: vec![],
            },
        };
        writeln!(w, "{}", model.param_names().join(","))?;
        for p in &self.params {
            let row: Vec<String> = model.flatten(p).iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Pointwise log-likelihood matrix: entry (s, i) is the Bernoulli log mass
/// of sample unit i under draw s.
pub fn pointwise_loglik(draws: &PosteriorDraws, sample: &Sample) -> Result<Vec<Vec<f64>>> {
    let data = GroupedData::from_sample(sample, &draws.spec);
    let n_combos = data.combo_levels.len();
    let mut out = Vec::with_capacity(draws.params.len());
    for p in &draws.params {
        let beta0 = p.beta0.unwrap_or(0.0);
        let mut lp1 = Vec::with_capacity(n_combos);
        let mut lp0 = Vec::with_capacity(n_combos);
        for c in 0..n_combos {
            let mut eta = beta0;
            for slot in 0..draws.spec.included_vars.len() {
                let l = data.combo_levels[c][slot];
                if l > draws.levels[slot] {
                    return Err(Error::LevelOutOfRange {
                        var: draws.spec.included_vars[slot] + 1,
                        level: l,
                    });
                }
                eta += p.alpha[slot][l - 1];
            }
            let (log1pexp, _) = bernoulli_logit_terms(eta);
            lp1.push(eta - log1pexp);
            lp0.push(-log1pexp);
        }
        let row: Vec<f64> = (0..sample.len())
            .map(|i| {
                let c = data.unit_combo[i];
                if sample.y[i] == 1 {
                    lp1[c]
                } else {
                    lp0[c]
                }
            })
            .collect();
        out.push(row);
    }
    Ok(out)
}


/// Predicted outcome probability of every poststratification cell under
/// every draw; entry (s, j).
pub fn cell_probability_draws(
    draws: &PosteriorDraws,
    table: &PoststratTable,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(draws.params.len());
    for p in &draws.params {
        let row = table
            .cells
            .iter()
            .map(|c| draws.eta(p, &c.levels).map(inv_logit))
            .collect::<Result<Vec<f64>>>()?;
        out.push(row);
    }
    Ok(out)
}
