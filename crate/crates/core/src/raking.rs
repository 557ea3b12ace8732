//! Survey weights by iterative proportional fitting to population margins.

use crate::error::{Error, Result};
use crate::sim::{Sample, NUM_VARS};

pub const DEFAULT_TOL: f64 = 1e-6;
pub const DEFAULT_MAX_ITER: usize = 100;

/// Raked weights for a sample.
#[derive(Debug, Clone)]
pub struct RakedWeights {
    /// Population-count scale: sums to approximately the population size.
    pub population_scale: Vec<f64>,
    /// Rescaled so the weights sum to the sample size.
    pub normalized: Vec<f64>,
    pub cycles: usize,
    pub residual: f64,
}

/// Iterative proportional fitting. Starting from uniform weights N/n, cycle
/// over the variables in X1..X4 order, multiplying each unit's weight by
/// (margin count) / (current weighted count of its level), until the largest
/// relative margin error drops below `tol`.
pub fn rake_weights(
    sample: &Sample,
    margins: &[Vec<f64>; NUM_VARS],
    tol: f64,
    max_iter: usize,
) -> Result<RakedWeights> {
    let n = sample.len();
    let pop_total: f64 = margins[0].iter().sum();
    for (k, margin) in margins.iter().enumerate() {
        for (l, &m) in margin.iter().enumerate() {
            if m <= 0.0 {
                return Err(Error::EmptyMarginLevel { var: k + 1, level: l + 1 });
            }
            if !sample.x_level.iter().any(|r| r[k] == l + 1) {
                return Err(Error::EmptyMarginLevel { var: k + 1, level: l + 1 });
            }
        }
    }

    let mut w = vec![pop_total / n as f64; n];
    let mut residual = f64::INFINITY;
    for cycle in 1..=max_iter {
        for k in 0..NUM_VARS {
            let mut level_totals = vec![0.0; margins[k].len()];
            for i in 0..n {
                level_totals[sample.x_level[i][k] - 1] += w[i];
            }
            for i in 0..n {
                let l = sample.x_level[i][k] - 1;
                w[i] *= margins[k][l] / level_totals[l];
            }
        }
        residual = max_relative_margin_error(sample, &w, margins);
        if residual < tol {
            let scale = n as f64 / w.iter().sum::<f64>();
            let normalized = w.iter().map(|&x| x * scale).collect();
            return Ok(RakedWeights { population_scale: w, normalized, cycles: cycle, residual });
        }
    }
    Err(Error::RakingDiverged { iters: max_iter, residual })
}

/// max over (variable, level) of |weighted count - margin| / margin.
pub fn max_relative_margin_error(
    sample: &Sample,
    weights: &[f64],
    margins: &[Vec<f64>; NUM_VARS],
) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..NUM_VARS {
        let mut level_totals = vec![0.0; margins[k].len()];
        for i in 0..sample.len() {
            level_totals[sample.x_level[i][k] - 1] += weights[i];
        }
        for (l, &m) in margins[k].iter().enumerate() {
            worst = worst.max((level_totals[l] - m).abs() / m);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::sim::{draw_sample, generate_population, DesignSpec, Sample};
    use approx::assert_relative_eq;

    fn toy_sample(levels: Vec<[usize; 4]>) -> Sample {
        let n = levels.len();
        Sample { indices: (0..n).collect(), y: vec![0; n], x_level: levels, weights: vec![1.0; n] }
    }

    #[test]
    fn proportional_sample_is_a_fixed_point() {
        // sample margins already proportional to population margins
        let mut levels = Vec::new();
        for l1 in 1..=2 {
            for l2 in 1..=2 {
                levels.push([l1, l2, 1, 1]);
            }
        }
        let s = toy_sample(levels);
        let margins = [vec![50.0, 50.0], vec![50.0, 50.0], vec![100.0], vec![100.0]];
        let r = rake_weights(&s, &margins, 1e-9, 10).unwrap();
        for &w in &r.population_scale {
            assert_relative_eq!(w, 25.0, epsilon = 1e-9);
        }
        assert_eq!(r.cycles, 1);
    }

    #[test]
    fn matches_hand_run_ipf_on_2x2() {
        // 2 binary variables, 10 sample units per cell, margins (60,40) x (70,30), N=100
        let mut levels = Vec::new();
        for l1 in 1..=2usize {
            for l2 in 1..=2usize {
                for _ in 0..10 {
                    levels.push([l1, l2, 1, 1]);
                }
            }
        }
        let s = toy_sample(levels.clone());
        let margins = [vec![60.0, 40.0], vec![70.0, 30.0], vec![100.0], vec![100.0]];

        // independent oracle: classical IPF run on the 2x2 cell table
        let mut cell = [[10.0_f64, 10.0], [10.0, 10.0]];
        for _ in 0..50 {
            for a in 0..2 {
                let rowsum = cell[a][0] + cell[a][1];
                let target = margins[0][a];
                cell[a][0] *= target / rowsum;
                cell[a][1] *= target / rowsum;
            }
            for b in 0..2 {
                let colsum = cell[0][b] + cell[1][b];
                let target = margins[1][b];
                cell[0][b] *= target / colsum;
                cell[1][b] *= target / colsum;
            }
        }

        let r = rake_weights(&s, &margins, 1e-10, 100).unwrap();
        for (i, l) in levels.iter().enumerate() {
            let expected = cell[l[0] - 1][l[1] - 1] / 10.0;
            assert_relative_eq!(r.population_scale[i], expected, max_relative = 1e-8);
        }
    }

    #[test]
    fn margins_reproduced_on_simulated_sample() {
        let spec = DesignSpec::design1(10_000, 1000, 31);
        let pop = generate_population(&spec, &mut stream(31, 0, "pop")).unwrap();
        let s = draw_sample(&pop, &spec, &mut stream(31, 0, "sample")).unwrap();
        let margins = pop.level_margins(&spec.levels_per_var);
        let r = rake_weights(&s, &margins, 1e-6, 100).unwrap();

        assert!(r.residual < 1e-6);
        assert!(r.population_scale.iter().all(|&w| w > 0.0));
        assert_relative_eq!(r.population_scale.iter().sum::<f64>(), 10_000.0, max_relative = 1e-5);
        assert_relative_eq!(r.normalized.iter().sum::<f64>(), 1000.0, max_relative = 1e-12);
        assert!(max_relative_margin_error(&s, &r.population_scale, &margins) < 1e-6);
    }

    #[test]
    fn scale_equivariance_and_order_invariance() {
        let spec = DesignSpec::design1(2000, 300, 32);
        let pop = generate_population(&spec, &mut stream(32, 0, "pop")).unwrap();
        let s = draw_sample(&pop, &spec, &mut stream(32, 0, "sample")).unwrap();
        let margins = pop.level_margins(&spec.levels_per_var);
        let r = rake_weights(&s, &margins, 1e-9, 100).unwrap();

        let scaled_margins = [
            margins[0].iter().map(|m| m * 3.0).collect::<Vec<_>>(),
            margins[1].iter().map(|m| m * 3.0).collect(),
            margins[2].iter().map(|m| m * 3.0).collect(),
            margins[3].iter().map(|m| m * 3.0).collect(),
        ];
        let r3 = rake_weights(&s, &scaled_margins, 1e-9, 100).unwrap();
        for i in 0..s.len() {
            assert_relative_eq!(r3.population_scale[i], 3.0 * r.population_scale[i], max_relative = 1e-6);
        }

        // reverse unit order: weights permute with the units
        let rev = Sample {
            indices: s.indices.iter().rev().cloned().collect(),
            y: s.y.iter().rev().cloned().collect(),
            x_level: s.x_level.iter().rev().cloned().collect(),
            weights: vec![1.0; s.len()],
        };
        let rr = rake_weights(&rev, &margins, 1e-9, 100).unwrap();
        for i in 0..s.len() {
            assert_relative_eq!(
                rr.population_scale[s.len() - 1 - i],
                r.population_scale[i],
                max_relative = 1e-6
            );
        }
    }

    #[test]
    fn missing_sample_level_errors() {
        let s = toy_sample(vec![[1, 1, 1, 1], [1, 2, 1, 1]]);
        let margins = [vec![60.0, 40.0], vec![70.0, 30.0], vec![100.0], vec![100.0]];
        assert!(matches!(
            rake_weights(&s, &margins, 1e-6, 100),
            Err(Error::EmptyMarginLevel { var: 1, level: 2 })
        ));
    }
}
