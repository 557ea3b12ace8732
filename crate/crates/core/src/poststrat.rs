//! Poststratification tables and estimand aggregation.
//!
//! A table holds one cell per observed level combination with its population
//! count. Cell-probability draws are aggregated into population or small-area
//! estimand distributions by count-weighted averaging, per draw.

use crate::error::{Error, Result};
use crate::math::quantile_sorted;
use crate::sim::{Population, NUM_VARS};
use std::collections::HashMap;
use std::io::Write;

#[derive(Debug, Clone)]
pub struct Cell {
    pub levels: [usize; NUM_VARS],
    pub count: f64,
    /// Mean of the true outcome probabilities of the units in this cell,
    /// kept so simulation truths can be computed per scope.
    pub mean_p_outcome: f64,
}

#[derive(Debug, Clone)]
pub struct PoststratTable {
    pub cells: Vec<Cell>,
}

/// Which units an estimand covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Population,
    /// One level of one variable; `var` is 0-based, `level` 1-based.
    Level { var: usize, level: usize },
}

impl Scope {
    pub fn contains(&self, levels: &[usize; NUM_VARS]) -> bool {
        match *self {
            Scope::Population => true,
            Scope::Level { var, level } => levels[var] == level,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            Scope::Population => "population".into(),
            Scope::Level { var, level } => format!("sae:x{}:{}", var + 1, level),
        }
    }
}

/// Posterior draws of one estimand.
#[derive(Debug, Clone)]
pub struct EstimandDraws {
    pub values: Vec<f64>,
    pub scope: Scope,
}

/// One cell per observed level combination, with population counts and
/// per-cell mean true outcome probability.
pub fn build_table(pop: &Population) -> PoststratTable {
    let mut index: HashMap<[usize; NUM_VARS], usize> = HashMap::new();
    let mut cells: Vec<Cell> = Vec::new();
    for i in 0..pop.len() {
        let key = pop.x_level[i];
        let slot = *index.entry(key).or_insert_with(|| {
            cells.push(Cell { levels: key, count: 0.0, mean_p_outcome: 0.0 });
            cells.len() - 1
        });
        cells[slot].count += 1.0;
        cells[slot].mean_p_outcome += pop.p_outcome[i];
    }
    for c in &mut cells {
        c.mean_p_outcome /= c.count;
    }
    cells.sort_by_key(|c| c.levels);
    PoststratTable { cells }
}

impl PoststratTable {
    pub fn total_count(&self) -> f64 {
        self.cells.iter().map(|c| c.count).sum()
    }

    /// Count-weighted mean of the per-cell true outcome probabilities over a
    /// scope: the simulation truth for that estimand.
    pub fn truth(&self, scope: Scope) -> Result<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for c in &self.cells {
            if scope.contains(&c.levels) {
                num += c.count * c.mean_p_outcome;
                den += c.count;
            }
        }
        if den <= 0.0 {
            return Err(Error::EmptySubset);
        }
        Ok(num / den)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "l1,l2,l3,l4,count,mean_p_outcome")?;
        for c in &self.cells {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                c.levels[0], c.levels[1], c.levels[2], c.levels[3], c.count, c.mean_p_outcome
            )?;
        }
        Ok(())
    }
}

/// Count-weighted average of cell-probability draws over the cells a scope
/// selects. `cell_probs` is draw-major: `cell_probs[s][j]` for cell `j` of
/// the table.
pub fn aggregate(
    cell_probs: &[Vec<f64>],
    table: &PoststratTable,
    scope: Scope,
) -> Result<EstimandDraws> {
    let selected: Vec<usize> = (0..table.cells.len())
        .filter(|&j| scope.contains(&table.cells[j].levels))
        .collect();
    let total: f64 = selected.iter().map(|&j| table.cells[j].count).sum();
    if selected.is_empty() || total <= 0.0 {
        return Err(Error::EmptySubset);
    }
    let values = cell_probs
        .iter()
        .map(|row| selected.iter().map(|&j| table.cells[j].count * row[j]).sum::<f64>() / total)
        .collect();
    Ok(EstimandDraws { values, scope })
}

/// Empirical central (1 - alpha) interval plus the mean.
pub fn estimand_interval(d: &EstimandDraws, alpha: f64) -> (f64, f64, f64) {
    assert!(alpha > 0.0 && alpha < 1.0);
    let mut sorted = d.values.clone();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
    let lower = quantile_sorted(&sorted, alpha / 2.0);
    let upper = quantile_sorted(&sorted, 1.0 - alpha / 2.0);
    let mean = crate::math::mean(&d.values);
    (lower, upper, mean)
}
