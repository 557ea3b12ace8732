//! Adaptive Hamiltonian Monte Carlo.
//!
//! Leapfrog integration with dual-averaging step-size adaptation toward a
//! target acceptance rate and windowed diagonal mass-matrix estimation
//! during warmup. Chains run in parallel, each on its own derived RNG
//! stream, so results are reproducible for a fixed (seed, config).

use crate::error::{Error, Result};
use crate::rng::stream;
use crate::sim::{Sample, NUM_VARS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::diagnostics::compute_diagnostics;
use super::model::{Model, ModelSpec, PosteriorDraws};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub draws: usize,
    pub seed: u64,
    pub target_accept: f64,
    /// Nominal total integration time per transition.
    pub int_time: f64,
    pub max_leapfrog: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            chains: 4,
            warmup: 1000,
            draws: 1000,
            seed: 0,
            target_accept: 0.8,
            int_time: 2.5,
            max_leapfrog: 128,
        }
    }
}

impl SamplerConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

const MAX_INIT_ATTEMPTS: usize = 100;
const DIVERGENCE_THRESHOLD: f64 = 1000.0;

struct ChainOut {
    draws: Vec<Vec<f64>>,
    divergences: usize,
}

/// Draw from the posterior of `model` built over `sample`.
pub fn sample_posterior(
    sample: &Sample,
    spec: ModelSpec,
    levels_per_var: &[usize; NUM_VARS],
    cfg: &SamplerConfig,
) -> Result<PosteriorDraws> {
    // every included level must be observed, or the posterior for that
    // level's coefficient is prior-only and the contract is unmet
    for &v in &spec.included_vars {
        for level in 1..=levels_per_var[v] {
            if !sample.x_level.iter().any(|r| r[v] == level) {
                return Err(Error::EmptyStratum { var: v + 1, level });
            }
        }
    }
    let model = Model::new(sample, spec, levels_per_var)?;

    let chains: Vec<Result<ChainOut>> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(&model, cfg, stream(cfg.seed, c as u64, "hmc_chain")))
        .collect();
    let chains = chains.into_iter().collect::<Result<Vec<ChainOut>>>()?;

    let divergences = chains.iter().map(|c| c.divergences).sum();
    let flat_chains: Vec<Vec<Vec<f64>>> = chains
        .iter()
        .map(|c| c.draws.iter().map(|q| model.flatten(&model.constrain(q))).collect())
        .collect();
    let diagnostics = compute_diagnostics(&model.param_names(), &flat_chains, divergences);

    let params = chains
        .iter()
        .flat_map(|c| c.draws.iter().map(|q| model.constrain(q)))
        .collect();
    Ok(PosteriorDraws { spec: model.spec.clone(), levels: model.levels.clone(), params, diagnostics })
}

fn run_chain(model: &Model, cfg: &SamplerConfig, mut rng: ChaCha8Rng) -> Result<ChainOut> {
    let dim = model.dim();
    let mut q = init_position(model, &mut rng)?;
    let mut inv_metric = vec![1.0; dim];

    let mut out = Vec::with_capacity(cfg.draws);
    let mut divergences = 0;

    // warmup with windowed mass-matrix estimation
    let schedule = AdaptationSchedule::new(cfg.warmup);
    let mut eps = find_reasonable_epsilon(model, &q, &inv_metric, &mut rng);
    let mut da = DualAveraging::new(eps, cfg.target_accept);
    let mut welford = Welford::new(dim);

    for step in 0..cfg.warmup {
        let (new_q, accept_stat, divergent) =
            transition(model, &q, eps, &inv_metric, cfg, &mut rng);
        q = new_q;
        if divergent {
            divergences += 1;
        }
        eps = da.update(accept_stat);
        if schedule.in_metric_window(step) {
            welford.push(&q);
        }
        if schedule.is_window_end(step) && welford.count >= 10 {
            inv_metric = welford.regularized_variance();
            welford = Welford::new(dim);
            eps = find_reasonable_epsilon(model, &q, &inv_metric, &mut rng);
            da = DualAveraging::new(eps, cfg.target_accept);
        }
    }
    if cfg.warmup > 0 {
        eps = da.averaged();
    }

    for _ in 0..cfg.draws {
        let (new_q, _, divergent) = transition(model, &q, eps, &inv_metric, cfg, &mut rng);
        q = new_q;
        if divergent {
            divergences += 1;
        }
        out.push(q.clone());
    }
    Ok(ChainOut { draws: out, divergences })
}

fn init_position(model: &Model, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    for _ in 0..MAX_INIT_ATTEMPTS {
        let q: Vec<f64> = (0..model.dim()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (lp, grad) = model.logp_grad(&q);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(q);
        }
    }
    Err(Error::BadInit(MAX_INIT_ATTEMPTS))
}

/// One HMC transition. Returns (new position, acceptance statistic,
/// divergent flag).
fn transition(
    model: &Model,
    q0: &[f64],
    eps: f64,
    inv_metric: &[f64],
    cfg: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, f64, bool) {
    let dim = q0.len();
    // momentum ~ N(0, metric); kinetic energy 0.5 * p' M^-1 p
    let p0: Vec<f64> = (0..dim)
        .map(|d| {
            let z: f64 = StandardNormal.sample(rng);
            z / inv_metric[d].sqrt()
        })
        .collect();

    let (lp0, grad0) = model.logp_grad(q0);
    let h0 = -lp0 + kinetic(&p0, inv_metric);

    let nominal = (cfg.int_time / eps).ceil() as usize;
    let max_steps = nominal.clamp(1, cfg.max_leapfrog);
    let min_steps = max_steps.div_ceil(2);
    let n_steps = rng.gen_range(min_steps..=max_steps);

    let mut q = q0.to_vec();
    let mut p = p0;
    let mut grad = grad0;
    let mut lp = lp0;
    for _ in 0..n_steps {
        for d in 0..dim {
            p[d] += 0.5 * eps * grad[d];
        }
        for d in 0..dim {
            q[d] += eps * inv_metric[d] * p[d];
        }
        let (lp_new, grad_new) = model.logp_grad(&q);
        lp = lp_new;
        grad = grad_new;
        for d in 0..dim {
            p[d] += 0.5 * eps * grad[d];
        }
        if !lp.is_finite() {
            break;
        }
    }

    let h1 = if lp.is_finite() { -lp + kinetic(&p, inv_metric) } else { f64::INFINITY };
    let delta = h0 - h1;
    let divergent = !delta.is_finite() || -delta > DIVERGENCE_THRESHOLD;
    let accept_stat = if divergent { 0.0 } else { delta.exp().min(1.0) };
    if !divergent && rng.gen::<f64>().ln() < delta {
        (q, accept_stat, false)
    } else {
        (q0.to_vec(), accept_stat, divergent)
    }
}

fn kinetic(p: &[f64], inv_metric: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_metric).map(|(pi, m)| pi * pi * m).sum::<f64>()
}

/// Double or halve the step size until one leapfrog step crosses 50%
/// acceptance.
fn find_reasonable_epsilon(
    model: &Model,
    q: &[f64],
    inv_metric: &[f64],
    rng: &mut ChaCha8Rng,
) -> f64 {
    let dim = q.len();
    let mut eps = 0.1;
    let p: Vec<f64> = (0..dim)
        .map(|d| {
            let z: f64 = StandardNormal.sample(rng);
            z / inv_metric[d].sqrt()
        })
        .collect();
    let (lp0, _) = model.logp_grad(q);
    let h0 = -lp0 + kinetic(&p, inv_metric);

    let log_ratio = |eps: f64| -> f64 {
        let mut q1 = q.to_vec();
        let mut p1 = p.clone();
        let (_, mut grad) = model.logp_grad(&q1);
        for d in 0..dim {
            p1[d] += 0.5 * eps * grad[d];
        }
        for d in 0..dim {
            q1[d] += eps * inv_metric[d] * p1[d];
        }
        let (lp, grad_new) = model.logp_grad(&q1);
        grad = grad_new;
        for d in 0..dim {
            p1[d] += 0.5 * eps * grad[d];
        }
        if lp.is_finite() {
            h0 - (-lp + kinetic(&p1, inv_metric))
        } else {
            f64::NEG_INFINITY
        }
    };

    let direction: f64 = if log_ratio(eps) > (0.5f64).ln() { 1.0 } else { -1.0 };
    for _ in 0..50 {
        let r = log_ratio(eps);
        if (direction > 0.0 && r <= (0.5f64).ln()) || (direction < 0.0 && r > (0.5f64).ln()) {
            break;
        }
        eps *= if direction > 0.0 { 2.0 } else { 0.5 };
        if !(1e-10..=1e4).contains(&eps) {
            break;
        }
    }
    eps.clamp(1e-8, 10.0)
}

/// Dual averaging with the usual constants.
struct DualAveraging {
    mu: f64,
    target: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    count: usize,
}

impl DualAveraging {
    fn new(eps0: f64, target: f64) -> Self {
        DualAveraging {
            mu: (10.0 * eps0).ln(),
            target,
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            count: 0,
        }
    }

    fn update(&mut self, accept_stat: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.count += 1;
        let m = self.count as f64;
        self.h_bar = (1.0 - 1.0 / (m + T0)) * self.h_bar
            + (self.target - accept_stat) / (m + T0);
        self.log_eps = self.mu - m.sqrt() / GAMMA * self.h_bar;
        let w = m.powf(-KAPPA);
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar;
        self.log_eps.exp()
    }

    fn averaged(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Stan-style warmup phases: a step-size-only opening buffer, doubling
/// variance-estimation windows, and a step-size-only closing buffer.
struct AdaptationSchedule {
    init_buffer: usize,
    term_start: usize,
    window_ends: Vec<usize>,
}

impl AdaptationSchedule {
    fn new(warmup: usize) -> Self {
        let init_buffer = (warmup as f64 * 0.15).round() as usize;
        let term_buffer = (warmup as f64 * 0.10).round() as usize;
        let term_start = warmup.saturating_sub(term_buffer);
        let mut window_ends = Vec::new();
        let mut size = ((warmup as f64 * 0.10).round() as usize).max(25);
        let mut start = init_buffer;
        while start + size <= term_start {
            let next = start + size;
            // absorb a too-small final window into this one
            if term_start - next < size * 2 {
                window_ends.push(term_start - 1);
                break;
            }
            window_ends.push(next - 1);
            start = next;
            size *= 2;
        }
        AdaptationSchedule { init_buffer, term_start, window_ends }
    }

    fn in_metric_window(&self, step: usize) -> bool {
        step >= self.init_buffer && step < self.term_start
    }

    fn is_window_end(&self, step: usize) -> bool {
        self.window_ends.contains(&step)
    }
}

struct Welford {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn new(dim: usize) -> Self {
        Welford { count: 0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for d in 0..x.len() {
            let delta = x[d] - self.mean[d];
            self.mean[d] += delta / n;
            self.m2[d] += delta * (x[d] - self.mean[d]);
        }
    }

    /// Sample variance shrunk toward unit scale, as in Stan's windowed
    /// diagonal metric adaptation.
    fn regularized_variance(&self) -> Vec<f64> {
        let n = self.count as f64;
        self.m2
            .iter()
            .map(|m2| {
                let var = m2 / (n - 1.0);
                (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            })
            .collect()
    }
}
