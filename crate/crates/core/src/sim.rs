//! Simulated populations and non-representative samples.
//!
//! Two designs are supported. Design I draws four continuous covariates from
//! normal(0, 2), discretizes each into 5 equal-range groups, and uses a plain
//! linear predictor for the outcome. Design II draws from uniform(-3, 3),
//! discretizes X4 into 12 groups, and routes X4 through an increasing shape
//! function before it enters the outcome predictor. In both designs the
//! inclusion probability depends strongly on X3 and X4, so samples drawn by
//! inclusion probability are biased with respect to the outcome.

use crate::error::{Error, Result};
use crate::math::inv_logit;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const NUM_VARS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DesignId {
    I,
    II,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovariateDist {
    /// normal with mean 0, sd 2
    Normal0Sd2,
    /// uniform on (-3, 3)
    UniformM3P3,
}

/// Full description of one simulation design.
///
/// `outcome_coefs[3]` multiplies `shape_fn(X4)` rather than X4 itself when
/// `design_id` is II.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignSpec {
    pub design_id: DesignId,
    pub n_pop: usize,
    pub n_sample: usize,
    pub levels_per_var: [usize; NUM_VARS],
    pub outcome_coefs: [f64; NUM_VARS],
    pub outcome_intercept: f64,
    pub inclusion_coefs: [f64; NUM_VARS],
    pub covariate_dist: CovariateDist,
    pub seed: u64,
}

impl DesignSpec {
    pub fn design1(n_pop: usize, n_sample: usize, seed: u64) -> Self {
        DesignSpec {
            design_id: DesignId::I,
            n_pop,
            n_sample,
            levels_per_var: [5, 5, 5, 5],
            outcome_coefs: [0.1, 1.0, 0.1, 1.0],
            outcome_intercept: 0.0,
            inclusion_coefs: [0.1, 0.1, 1.0, 1.0],
            covariate_dist: CovariateDist::Normal0Sd2,
            seed,
        }
    }

    pub fn design2(n_pop: usize, n_sample: usize, seed: u64) -> Self {
        DesignSpec {
            design_id: DesignId::II,
            n_pop,
            n_sample,
            levels_per_var: [5, 5, 5, 12],
            outcome_coefs: [0.05, 0.5, 0.05, 1.5],
            outcome_intercept: -1.0,
            inclusion_coefs: [0.1, 0.1, 1.0, 1.0],
            covariate_dist: CovariateDist::UniformM3P3,
            seed,
        }
    }

    pub fn total_levels(&self) -> usize {
        self.levels_per_var.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let expected_levels = match self.design_id {
            DesignId::I => [5, 5, 5, 5],
            DesignId::II => [5, 5, 5, 12],
        };
        if self.levels_per_var != expected_levels {
            return Err(Error::InvalidSpec(format!(
                "levels_per_var must be {:?} for design {:?}",
                expected_levels, self.design_id
            )));
        }
        if self.n_pop == 0 || self.n_sample == 0 {
            return Err(Error::InvalidSpec("counts must be positive".into()));
        }
        if self.n_sample < self.total_levels() {
            return Err(Error::InvalidSpec(format!(
                "n_sample {} is below the {} enforced coverage units",
                self.n_sample,
                self.total_levels()
            )));
        }
        if self.n_sample > self.n_pop {
            return Err(Error::InvalidSpec("n_sample exceeds n_pop".into()));
        }
        Ok(())
    }
}

/// A realized simulated population.
#[derive(Debug, Clone)]
pub struct Population {
    pub x_cont: Vec<[f64; NUM_VARS]>,
    /// 1-based level indices, consistent with `bin_edges`.
    pub x_level: Vec<[usize; NUM_VARS]>,
    pub p_outcome: Vec<f64>,
    pub y: Vec<u8>,
    pub p_incl: Vec<f64>,
    /// Per variable, the L+1 bin edges used for discretization.
    pub bin_edges: [Vec<f64>; NUM_VARS],
}

impl Population {
    pub fn len(&self) -> usize {
        self.x_cont.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_cont.is_empty()
    }

    /// Population count of each level of each variable.
    pub fn level_margins(&self, levels_per_var: &[usize; NUM_VARS]) -> [Vec<f64>; NUM_VARS] {
        let mut margins = [
            vec![0.0; levels_per_var[0]],
            vec![0.0; levels_per_var[1]],
            vec![0.0; levels_per_var[2]],
            vec![0.0; levels_per_var[3]],
        ];
        for row in &self.x_level {
            for k in 0..NUM_VARS {
                margins[k][row[k] - 1] += 1.0;
            }
        }
        margins
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "id,x1,x2,x3,x4,l1,l2,l3,l4,p_outcome,p_incl,y"
        )?;
        for i in 0..self.len() {
            let x = self.x_cont[i];
            let l = self.x_level[i];
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                i, x[0], x[1], x[2], x[3], l[0], l[1], l[2], l[3], self.p_outcome[i], self.p_incl[i], self.y[i]
            )?;
        }
        Ok(())
    }
}

/// A drawn sample: indices into a population plus copied observables.
#[derive(Debug, Clone)]
pub struct Sample {
    pub indices: Vec<usize>,
    pub y: Vec<u8>,
    pub x_level: Vec<[usize; NUM_VARS]>,
    /// Raked weights; all 1.0 until `raking::rake_weights` fills them.
    pub weights: Vec<f64>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "id,l1,l2,l3,l4,y,w_rake")?;
        for i in 0..self.len() {
            let l = self.x_level[i];
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                self.indices[i], l[0], l[1], l[2], l[3], self.y[i], self.weights[i]
            )?;
        }
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Sample> {
        let mut rdr = csv::Reader::from_reader(r);
        let mut s = Sample { indices: vec![], y: vec![], x_level: vec![], weights: vec![] };
        for rec in rdr.records() {
            let rec = rec?;
            let field = |i: usize| -> Result<&str> {
                rec.get(i).ok_or_else(|| Error::Config("short sample CSV row".into()))
            };
            s.indices.push(field(0)?.parse().map_err(|e| Error::Config(format!("bad id: {e}")))?);
            let mut levels = [0usize; NUM_VARS];
            for (k, lv) in levels.iter_mut().enumerate() {
                *lv = field(1 + k)?.parse().map_err(|e| Error::Config(format!("bad level: {e}")))?;
            }
            s.x_level.push(levels);
            s.y.push(field(5)?.parse().map_err(|e| Error::Config(format!("bad y: {e}")))?);
            s.weights.push(field(6)?.parse().map_err(|e| Error::Config(format!("bad weight: {e}")))?);
        }
        Ok(s)
    }
}

/// Increasing-shaped preference function used by design II.
pub fn shape_fn(x: f64) -> f64 {
    0.7 - 3.0 * (-x / 0.2).exp()
}

/// i.i.d. covariate draws, one row per population unit.
pub fn gen_covariates<R: Rng>(spec: &DesignSpec, rng: &mut R) -> Vec<[f64; NUM_VARS]> {
    let mut out = Vec::with_capacity(spec.n_pop);
    match spec.covariate_dist {
        CovariateDist::Normal0Sd2 => {
            let d = Normal::new(0.0, 2.0).unwrap();
            for _ in 0..spec.n_pop {
                out.push([d.sample(rng), d.sample(rng), d.sample(rng), d.sample(rng)]);
            }
        }
        CovariateDist::UniformM3P3 => {
            let d = Uniform::new(-3.0, 3.0);
            for _ in 0..spec.n_pop {
                out.push([d.sample(rng), d.sample(rng), d.sample(rng), d.sample(rng)]);
            }
        }
    }
    out
}

/// True outcome probability for one unit, from its continuous covariates.
pub fn outcome_probability(x_row: &[f64; NUM_VARS], spec: &DesignSpec) -> f64 {
    let c = &spec.outcome_coefs;
    let eta = match spec.design_id {
        DesignId::I => {
            spec.outcome_intercept + c[0] * x_row[0] + c[1] * x_row[1] + c[2] * x_row[2] + c[3] * x_row[3]
        }
        DesignId::II => {
            spec.outcome_intercept
                + c[0] * x_row[0]
                + c[1] * x_row[1]
                + c[2] * x_row[2]
                + c[3] * shape_fn(x_row[3])
        }
    };
    inv_logit(eta)
}

/// Probability that a unit is eligible for sampling.
pub fn inclusion_probability(x_row: &[f64; NUM_VARS], spec: &DesignSpec) -> f64 {
    let c = &spec.inclusion_coefs;
    inv_logit(c[0] * x_row[0] + c[1] * x_row[1] + c[2] * x_row[2] + c[3] * x_row[3])
}

/// Discretize into `levels` equal-width bins spanning the realized
/// [min, max] of the column. Bins are half-open with the final bin closed.
/// Returns 1-based level indices together with the bin edges.
pub fn discretize_equal_range(x_col: &[f64], levels: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let lo = x_col.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = x_col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::DegenerateColumn);
    }
    discretize_fixed_range(x_col, levels, lo, hi)
}

/// Same binning rule over a known support, used by design II where the
/// covariate bounds are fixed by construction.
pub fn discretize_fixed_range(
    x_col: &[f64],
    levels: usize,
    lo: f64,
    hi: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    assert!(levels >= 2, "need at least 2 bins");
    if !(hi > lo) {
        return Err(Error::DegenerateColumn);
    }
    let width = (hi - lo) / levels as f64;
    let edges: Vec<f64> = (0..=levels).map(|i| lo + width * i as f64).collect();
    let idx = x_col
        .iter()
        .map(|&x| {
            let raw = ((x - lo) / width).floor() as isize;
            (raw.clamp(0, levels as isize - 1) + 1) as usize
        })
        .collect();
    Ok((idx, edges))
}

/// Draw a full population: covariates, true probabilities computed on the
/// continuous covariates, realized outcomes, and discretized levels.
pub fn generate_population<R: Rng>(spec: &DesignSpec, rng: &mut R) -> Result<Population> {
    spec.validate()?;
    let x_cont = gen_covariates(spec, rng);
    let p_outcome: Vec<f64> = x_cont.iter().map(|r| outcome_probability(r, spec)).collect();
    let p_incl: Vec<f64> = x_cont.iter().map(|r| inclusion_probability(r, spec)).collect();
    let y: Vec<u8> = p_outcome.iter().map(|&p| u8::from(rng.gen::<f64>() < p)).collect();

    let mut x_level = vec![[0usize; NUM_VARS]; spec.n_pop];
    let mut bin_edges: [Vec<f64>; NUM_VARS] = Default::default();
    for k in 0..NUM_VARS {
        let col: Vec<f64> = x_cont.iter().map(|r| r[k]).collect();
        let (idx, edges) = match spec.covariate_dist {
            CovariateDist::Normal0Sd2 => discretize_equal_range(&col, spec.levels_per_var[k])?,
            CovariateDist::UniformM3P3 => {
                discretize_fixed_range(&col, spec.levels_per_var[k], -3.0, 3.0)?
            }
        };
        for (row, lv) in x_level.iter_mut().zip(idx) {
            row[k] = lv;
        }
        bin_edges[k] = edges;
    }

    Ok(Population { x_cont, x_level, p_outcome, y, p_incl, bin_edges })
}

/// One weighted draw without replacement, proportional to `p_incl` over the
/// units where `eligible` holds. Returns the drawn index.
fn weighted_draw<R: Rng>(
    pop: &Population,
    taken: &[bool],
    eligible: impl Fn(usize) -> bool,
    rng: &mut R,
) -> Option<usize> {
    let mut total = 0.0;
    for i in 0..pop.len() {
        if !taken[i] && eligible(i) {
            total += pop.p_incl[i];
        }
    }
    if total <= 0.0 {
        return None;
    }
    let mut u = rng.gen::<f64>() * total;
    let mut last = None;
    for i in 0..pop.len() {
        if !taken[i] && eligible(i) {
            last = Some(i);
            u -= pop.p_incl[i];
            if u <= 0.0 {
                return Some(i);
            }
        }
    }
    last // floating-point slack lands on the final eligible unit
}

/// Draw a sample of size `spec.n_sample`: the bulk is selected without
/// replacement with probability proportional to inclusion probability, then
/// one unit per (variable, level) is drawn from the remaining units of that
/// stratum so every level is covered.
pub fn draw_sample<R: Rng>(pop: &Population, spec: &DesignSpec, rng: &mut R) -> Result<Sample> {
    spec.validate()?;
    let enforced = spec.total_levels();
    let bulk = spec.n_sample - enforced;
    let mut taken = vec![false; pop.len()];
    let mut order = Vec::with_capacity(spec.n_sample);

    for _ in 0..bulk {
        let i = weighted_draw(pop, &taken, |_| true, rng)
            .expect("population exhausted during bulk draw");
        taken[i] = true;
        order.push(i);
    }
    for k in 0..NUM_VARS {
        for level in 1..=spec.levels_per_var[k] {
            let i = weighted_draw(pop, &taken, |i| pop.x_level[i][k] == level, rng)
                .ok_or(Error::EmptyStratum { var: k + 1, level })?;
            taken[i] = true;
            order.push(i);
        }
    }

    let y = order.iter().map(|&i| pop.y[i]).collect();
    let x_level = order.iter().map(|&i| pop.x_level[i]).collect();
    let n = order.len();
    Ok(Sample { indices: order, y, x_level, weights: vec![1.0; n] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use approx::assert_relative_eq;

    #[test]
    fn shape_fn_values() {
        assert_relative_eq!(shape_fn(0.0), -2.3, epsilon = 1e-12);
        assert_relative_eq!(shape_fn(3.0), 0.6999991, epsilon = 1e-6);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=60 {
            let x = -3.0 + i as f64 * 0.1;
            let v = shape_fn(x);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn outcome_probability_examples() {
        let d1 = DesignSpec::design1(100, 40, 0);
        assert_eq!(outcome_probability(&[0.0; 4], &d1), 0.5);

        let d2 = DesignSpec::design2(100, 40, 0);
        let p = outcome_probability(&[0.0; 4], &d2);
        assert_relative_eq!(p, inv_logit(-1.0 + 1.5 * shape_fn(0.0)), epsilon = 1e-12);
        assert_relative_eq!(p, 0.0116, epsilon = 2e-4);

        let mut variant = d1.clone();
        variant.outcome_coefs[1] = 1.5;
        assert_relative_eq!(
            outcome_probability(&[0.0, 1.0, 0.0, 0.0], &variant),
            inv_logit(1.5),
            epsilon = 1e-12
        );
        assert_relative_eq!(outcome_probability(&[0.0, 1.0, 0.0, 0.0], &variant), 0.8176, epsilon = 1e-4);
    }

    #[test]
    fn inclusion_probability_examples() {
        let d1 = DesignSpec::design1(100, 40, 0);
        assert_eq!(inclusion_probability(&[0.0; 4], &d1), 0.5);
        assert_relative_eq!(inclusion_probability(&[0.0, 0.0, 1.0, 1.0], &d1), 0.8808, epsilon = 1e-4);
        // X1 and X2 share a coefficient
        assert_eq!(
            inclusion_probability(&[0.4, -1.1, 0.2, 0.3], &d1),
            inclusion_probability(&[-1.1, 0.4, 0.2, 0.3], &d1)
        );
    }

    #[test]
    fn covariates_match_design_distributions() {
        let d1 = DesignSpec::design1(10_000, 1000, 11);
        let x = gen_covariates(&d1, &mut stream(11, 0, "cov"));
        for k in 0..4 {
            let col: Vec<f64> = x.iter().map(|r| r[k]).collect();
            assert!(crate::math::mean(&col).abs() < 0.1);
            assert!((crate::math::sd(&col) - 2.0).abs() < 0.1);
        }

        let d2 = DesignSpec::design2(5000, 500, 11);
        let x2 = gen_covariates(&d2, &mut stream(11, 0, "cov"));
        assert!(x2.iter().flatten().all(|&v| (-3.0..3.0).contains(&v)));
    }

    #[test]
    fn covariates_deterministic() {
        let d1 = DesignSpec::design1(100, 40, 5);
        let a = gen_covariates(&d1, &mut stream(5, 0, "cov"));
        let b = gen_covariates(&d1, &mut stream(5, 0, "cov"));
        assert_eq!(a, b);
    }

    #[test]
    fn discretize_basics() {
        let (idx, edges) = discretize_equal_range(&[0.0, 1.0, 2.0, 3.0, 4.0], 5).unwrap();
        assert_eq!(idx, vec![1, 2, 3, 4, 5]);
        assert_eq!(edges.len(), 6);

        // min -> level 1, max -> level L
        let vals = [2.5, -1.0, 7.0, 3.0];
        let (idx, _) = discretize_equal_range(&vals, 3).unwrap();
        assert_eq!(idx[1], 1);
        assert_eq!(idx[2], 3);

        assert!(matches!(
            discretize_equal_range(&[2.0, 2.0, 2.0], 3),
            Err(Error::DegenerateColumn)
        ));
    }

    #[test]
    fn discretize_partition_property() {
        let d1 = DesignSpec::design1(10_000, 1000, 3);
        let x = gen_covariates(&d1, &mut stream(3, 0, "cov"));
        let col: Vec<f64> = x.iter().map(|r| r[0]).collect();
        let (idx, edges) = discretize_equal_range(&col, 5).unwrap();
        let widths: Vec<f64> = edges.windows(2).map(|w| w[1] - w[0]).collect();
        for w in &widths {
            assert_relative_eq!(*w, widths[0], max_relative = 1e-9);
        }
        let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(edges[0], lo);
        assert_relative_eq!(edges[5], hi);
        // middle bin dominates for normal draws
        let mut counts = [0usize; 5];
        for &l in &idx {
            counts[l - 1] += 1;
        }
        assert!(counts[2] > counts[0] && counts[2] > counts[4]);
        assert!(counts[2] > counts[1] && counts[2] > counts[3]);
    }

    #[test]
    fn population_trends_and_determinism() {
        let d1 = DesignSpec::design1(10_000, 1000, 42);
        let pop = generate_population(&d1, &mut stream(42, 0, "pop")).unwrap();
        let pop2 = generate_population(&d1, &mut stream(42, 0, "pop")).unwrap();
        assert_eq!(pop.y, pop2.y);
        assert_eq!(pop.x_level, pop2.x_level);
        assert_eq!(pop.p_outcome, pop2.p_outcome);

        // mean outcome probability per level of X2 increases with level
        let means = per_level_mean(&pop, 1);
        for w in means.windows(2) {
            assert!(w[1] > w[0], "X2 trend not increasing: {means:?}");
        }

        let d2 = DesignSpec::design2(10_000, 500, 42);
        let pop = generate_population(&d2, &mut stream(42, 0, "pop")).unwrap();
        let means = per_level_mean(&pop, 3);
        // the shape function saturates, so the trend flattens at high levels;
        // allow sampling noise on the plateau
        for w in means.windows(2) {
            assert!(w[1] > w[0] - 0.02, "X4 trend not increasing: {means:?}");
        }
        assert!(means[11] > means[0] + 0.3, "X4 trend too flat: {means:?}");
        assert!(means[0] < 0.05, "level 1 of X4 should be near zero: {means:?}");
    }

    fn per_level_mean(pop: &Population, var: usize) -> Vec<f64> {
        let max_level = pop.x_level.iter().map(|r| r[var]).max().unwrap();
        (1..=max_level)
            .map(|l| {
                let vals: Vec<f64> = (0..pop.len())
                    .filter(|&i| pop.x_level[i][var] == l)
                    .map(|i| pop.p_outcome[i])
                    .collect();
                crate::math::mean(&vals)
            })
            .collect()
    }

    #[test]
    fn sample_covers_every_level_and_is_biased() {
        let d1 = DesignSpec::design1(10_000, 1000, 9);
        let mut mean_incl_sampled = 0.0;
        let mut mean_incl_pop = 0.0;
        for it in 0..5 {
            let pop = generate_population(&d1, &mut stream(9, it, "pop")).unwrap();
            let s = draw_sample(&pop, &d1, &mut stream(9, it, "sample")).unwrap();
            assert_eq!(s.len(), 1000);
            let mut seen = std::collections::HashSet::new();
            for &i in &s.indices {
                assert!(seen.insert(i), "duplicate index {i}");
            }
            for k in 0..4 {
                for level in 1..=5 {
                    assert!(s.x_level.iter().any(|r| r[k] == level), "missing var {k} level {level}");
                }
            }
            mean_incl_sampled +=
                crate::math::mean(&s.indices.iter().map(|&i| pop.p_incl[i]).collect::<Vec<_>>());
            mean_incl_pop += crate::math::mean(&pop.p_incl);
        }
        assert!(mean_incl_sampled > mean_incl_pop, "sample selection should be biased");
    }

    #[test]
    fn sample_deterministic() {
        let d1 = DesignSpec::design1(2000, 300, 13);
        let pop = generate_population(&d1, &mut stream(13, 0, "pop")).unwrap();
        let a = draw_sample(&pop, &d1, &mut stream(13, 0, "sample")).unwrap();
        let b = draw_sample(&pop, &d1, &mut stream(13, 0, "sample")).unwrap();
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn outcome_monotone_in_strong_variables_over_replicates() {
        let d1 = DesignSpec::design1(4000, 400, 77);
        let mut ok = 0;
        let reps = 20;
        for it in 0..reps {
            let pop = generate_population(&d1, &mut stream(77, it, "pop")).unwrap();
            let m2 = per_level_mean(&pop, 1);
            let m4 = per_level_mean(&pop, 3);
            let mono = |m: &[f64]| m.windows(2).all(|w| w[1] > w[0]);
            if mono(&m2) && mono(&m4) {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * reps as f64, "monotone in {ok}/{reps} replicates");
    }

    #[test]
    fn sample_csv_round_trip() {
        let d1 = DesignSpec::design1(2000, 300, 21);
        let pop = generate_population(&d1, &mut stream(21, 0, "pop")).unwrap();
        let s = draw_sample(&pop, &d1, &mut stream(21, 0, "sample")).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = Sample::read_csv(&buf[..]).unwrap();
        assert_eq!(back.indices, s.indices);
        assert_eq!(back.x_level, s.x_level);
        assert_eq!(back.y, s.y);
    }
}
