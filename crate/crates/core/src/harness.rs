//! Experiment orchestration: model enumeration, replicated runs of both
//! simulation designs, flat-file persistence, and report generation.
//!
//! A run directory contains one records file per completed iteration under
//! `iters/`; iteration files are written atomically (temp file + rename), so
//! their presence marks the iteration as done and reruns skip it. Merged
//! `records.csv` / `pointwise.csv` / `diffs.csv` files are rebuilt from the
//! per-iteration files at the end of every run, and `manifest.json` pins the
//! seed and a hash of the configuration so every record is attributable.

use crate::error::{Error, Result};
use crate::inference::{
    cell_probability_draws, pointwise_loglik, sample_posterior, ModelSpec, SamplerConfig,
};
use crate::loo::{elpd_psis_loo, elpd_wtd_psis_loo, subset_mean_elpd};
use crate::poststrat::{aggregate, build_table, estimand_interval, PoststratTable, Scope};
use crate::raking::{rake_weights, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::scoring::{bias_and_width, diffs_agree, interval_score, score_diff,
    weighted_individual_score, DiffKind};
use crate::sim::{draw_sample, generate_population, DesignSpec, Population, Sample, NUM_VARS};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Nominal miss rate of all prediction intervals (90% intervals).
pub const ALPHA: f64 = 0.1;

/// Variable-taxonomy group of a model, by whether it contains the
/// bias variable (X4) and the precision variable (X2).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    BiasPrecision,
    BiasOnly,
    PrecisionOnly,
    Irrelevant,
}

impl Group {
    pub fn label(self) -> &'static str {
        match self {
            Group::BiasPrecision => "bias-precision",
            Group::BiasOnly => "bias-only",
            Group::PrecisionOnly => "precision-only",
            Group::Irrelevant => "irrelevant",
        }
    }

    pub fn of(spec: &ModelSpec) -> Group {
        let has_x2 = spec.included_vars.contains(&1);
        let has_x4 = spec.included_vars.contains(&3);
        match (has_x2, has_x4) {
            (true, true) => Group::BiasPrecision,
            (false, true) => Group::BiasOnly,
            (true, false) => Group::PrecisionOnly,
            (false, false) => Group::Irrelevant,
        }
    }
}

/// A candidate model plus its taxonomy group.
#[derive(Debug, Clone)]
pub struct ModelEntry {
    pub spec: ModelSpec,
    pub group: Group,
}

/// All non-empty subsets of the first `k` variables, without intercept.
pub fn enumerate_models(k: usize) -> Vec<ModelEntry> {
    assert!(k >= 1 && k <= NUM_VARS);
    let mut out = Vec::with_capacity((1 << k) - 1);
    for mask in 1u32..(1 << k) {
        let vars: Vec<usize> = (0..k).filter(|v| mask & (1 << v) != 0).collect();
        let spec = ModelSpec::new(&vars, false).expect("non-empty subset");
        let group = Group::of(&spec);
        out.push(ModelEntry { spec, group });
    }
    out
}

/// Look up the group label of a model by its id string.
pub fn group_of_model_id(model_id: &str) -> Option<&'static str> {
    enumerate_models(NUM_VARS)
        .into_iter()
        .find(|m| m.spec.label() == model_id)
        .map(|m| m.group.label())
}

/// Configuration variants from the appendix experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Base,
    /// Design I with outcome coefficient 1.5 on X2.
    X2Strong,
    /// Design I with outcome coefficient 1.5 on X4.
    X4Strong,
    /// Design II with n = 1000.
    N1000,
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Variant> {
        match s {
            "base" => Ok(Variant::Base),
            "x2strong" => Ok(Variant::X2Strong),
            "x4strong" => Ok(Variant::X4Strong),
            "n1000" => Ok(Variant::N1000),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Base => "base",
            Variant::X2Strong => "x2strong",
            Variant::X4Strong => "x4strong",
            Variant::N1000 => "n1000",
        };
        f.write_str(s)
    }
}

/// A full run configuration; every field maps to a config-file key of the
/// same name and to a CLI flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// 1 or 2.
    pub design: u8,
    pub seed: u64,
    pub iterations: usize,
    pub n_pop: usize,
    pub n_sample: usize,
    pub chains: usize,
    pub warmup: usize,
    /// Post-warmup draws per chain.
    pub draws: usize,
    #[serde(default)]
    pub variant: Variant,
    pub out_dir: PathBuf,
}

impl RunConfig {
    pub fn defaults_design1(out_dir: PathBuf) -> RunConfig {
        RunConfig {
            design: 1,
            seed: 1,
            iterations: 50,
            n_pop: 10_000,
            n_sample: 1000,
            chains: 4,
            warmup: 500,
            draws: 1000,
            variant: Variant::Base,
            out_dir,
        }
    }

    pub fn defaults_design2(out_dir: PathBuf) -> RunConfig {
        RunConfig { design: 2, n_sample: 500, ..RunConfig::defaults_design1(out_dir) }
    }

    pub fn from_toml_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (self.design, self.variant) {
            (1, Variant::N1000) => {
                return Err(Error::Config("variant n1000 applies to design 2".into()))
            }
            (2, Variant::X2Strong) | (2, Variant::X4Strong) => {
                return Err(Error::Config(format!(
                    "variant {} applies to design 1",
                    self.variant
                )))
            }
            (1, _) | (2, _) => {}
            (d, _) => return Err(Error::Config(format!("design must be 1 or 2, got {d}"))),
        }
        if self.iterations == 0 || self.chains == 0 || self.draws == 0 {
            return Err(Error::Config("iterations, chains, draws must be positive".into()));
        }
        Ok(())
    }

    /// Design spec for one replicate, with the variant's overrides applied.
    pub fn design_spec(&self) -> Result<DesignSpec> {
        self.validate()?;
        let mut spec = match self.design {
            1 => DesignSpec::design1(self.n_pop, self.n_sample, self.seed),
            _ => DesignSpec::design2(self.n_pop, self.n_sample, self.seed),
        };
        match self.variant {
            Variant::Base => {}
            Variant::X2Strong => spec.outcome_coefs[1] = 1.5,
            Variant::X4Strong => spec.outcome_coefs[3] = 1.5,
            Variant::N1000 => spec.n_sample = 1000,
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn sampler_config(&self, fit_seed: u64) -> SamplerConfig {
        SamplerConfig {
            chains: self.chains,
            warmup: self.warmup,
            draws: self.draws,
            seed: fit_seed,
            ..SamplerConfig::default()
        }
    }

    /// Stable hash of everything that determines the results (all fields
    /// except the output directory).
    pub fn hash(&self) -> String {
        let key = format!(
            "design={} seed={} iterations={} n_pop={} n_sample={} chains={} warmup={} \
             draws={} variant={}",
            self.design,
            self.seed,
            self.iterations,
            self.n_pop,
            self.n_sample,
            self.chains,
            self.warmup,
            self.draws,
            self.variant
        );
        // FNV-1a, printed as hex
        let mut h: u64 = 0xcbf29ce484222325;
        for b in key.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }
}

/// One row of `records.csv`.
#[derive(Debug, Clone)]
pub struct ScoreRecord {
    pub iteration: usize,
    pub model_id: String,
    pub scope: String,
    pub criterion: String,
    pub value: f64,
}

impl ScoreRecord {
    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration, self.model_id, self.scope, self.criterion, self.value
        )
    }
}

pub const RECORDS_HEADER: &str = "iteration,model_id,scope,criterion,value";
pub const POINTWISE_HEADER: &str = "iteration,model_id,unit_id,elpd,wtd_elpd,khat";
pub const DIFFS_HEADER: &str =
    "iteration,scope,diff_is,diff_loo,diff_loo_wtd,agree,agree_wtd";
pub const COUNTS_HEADER: &str = "iteration,var,level,count";

/// Everything one iteration produces, kept in memory until the iteration
/// completes and is flushed atomically.
#[derive(Default)]
struct IterationOutput {
    records: Vec<ScoreRecord>,
    pointwise: Vec<String>,
    diffs: Vec<String>,
    counts: Vec<String>,
    failures: Vec<String>,
}

/// Scores of one fitted model in one iteration, reused by both designs.
struct FitScores {
    /// (scope, criterion, value) triples.
    records: Vec<(String, String, f64)>,
    /// Mean pointwise elpd over sample units.
    loo_mean: f64,
    /// Weighted mean pointwise elpd (Eq. 8 scale).
    wtd_mean: f64,
    /// Mean interval score over sample units.
    is_sample: f64,
    /// Interval score of the poststratified population estimand.
    is_population: f64,
    /// Per-level small-area values keyed by scope label.
    sae: Vec<(String, f64, f64, f64)>,
}

/// Fit one model and compute every scope's scores against simulation truth.
fn score_fit(
    cfg: &RunConfig,
    dspec: &DesignSpec,
    pop: &Population,
    sample: &Sample,
    table: &PoststratTable,
    spec: ModelSpec,
    fit_seed: u64,
    out: &mut IterationOutput,
    iteration: usize,
) -> Result<FitScores> {
    let model_id = spec.label();
    let scfg = cfg.sampler_config(fit_seed);
    let draws = sample_posterior(sample, spec, &dspec.levels_per_var, &scfg)?;

    let loglik = pointwise_loglik(&draws, sample)?;
    let psis = elpd_psis_loo(&loglik)?;
    let wtd = elpd_wtd_psis_loo(&loglik, &sample.weights)?;
    let n = sample.len();

    // per-unit 90% intervals of the predicted probability, scored against
    // each sampled unit's true outcome probability
    let unit_probs = draws.unit_probability_draws(sample)?;
    let mut unit_scores = Vec::with_capacity(n);
    for i in 0..n {
        let mut v: Vec<f64> = unit_probs.iter().map(|row| row[i]).collect();
        v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let l = crate::math::quantile_sorted(&v, ALPHA / 2.0);
        let u = crate::math::quantile_sorted(&v, 1.0 - ALPHA / 2.0);
        let truth_i = pop.p_outcome[sample.indices[i]];
        unit_scores.push(interval_score(l, u, truth_i, ALPHA)?);
    }

    let mut records: Vec<(String, String, f64)> = Vec::new();
    let is_sample = crate::math::mean(&unit_scores);
    let loo_mean = psis.elpd / n as f64;
    records.push(("individual_sample".into(), "IS".into(), is_sample));
    records.push(("individual_sample".into(), "PSIS_LOO".into(), loo_mean));
    records.push(("individual_sample".into(), "WTD_PSIS_LOO".into(), wtd.elpd_mean));
    records.push(("individual_sample".into(), "KHAT_FRAC".into(), psis.high_khat_fraction));

    let is_pop_indiv = weighted_individual_score(&unit_scores, &sample.weights);
    records.push(("individual_population".into(), "IS".into(), is_pop_indiv));
    records.push(("individual_population".into(), "PSIS_LOO".into(), loo_mean));
    records.push(("individual_population".into(), "WTD_PSIS_LOO".into(), wtd.elpd_mean));

    // MRP estimand
    let cell_probs = cell_probability_draws(&draws, table)?;
    let est = aggregate(&cell_probs, table, Scope::Population)?;
    let truth = table.truth(Scope::Population)?;
    let (l, u, _) = estimand_interval(&est, ALPHA);
    let is_population = interval_score(l, u, truth, ALPHA)?;
    let (bias, width) = bias_and_width(&est, truth, ALPHA);
    records.push(("population".into(), "IS".into(), is_population));
    records.push(("population".into(), "bias".into(), bias));
    records.push(("population".into(), "width".into(), width));
    records.push(("population".into(), "PSIS_LOO".into(), psis.elpd));
    records.push(("population".into(), "WTD_PSIS_LOO".into(), wtd.elpd_sum));

    // small areas: one scope per level of each variable
    let mut sae = Vec::new();
    for var in 0..NUM_VARS {
        for level in 1..=dspec.levels_per_var[var] {
            let scope = Scope::Level { var, level };
            let label = scope.label();
            let subset: Vec<usize> =
                (0..n).filter(|&i| sample.x_level[i][var] == level).collect();
            let est = aggregate(&cell_probs, table, scope)?;
            let truth = table.truth(scope)?;
            let (l, u, _) = estimand_interval(&est, ALPHA);
            let is_v = interval_score(l, u, truth, ALPHA)?;
            let loo_v = subset_mean_elpd(&psis.elpd_i, &subset)?;
            let wtd_v = subset_mean_elpd(&wtd.weighted_elpd_i, &subset)?;
            records.push((label.clone(), "IS".into(), is_v));
            records.push((label.clone(), "PSIS_LOO".into(), loo_v));
            records.push((label.clone(), "WTD_PSIS_LOO".into(), wtd_v));
            sae.push((label, is_v, loo_v, wtd_v));
        }
    }

    for i in 0..n {
        out.pointwise.push(format!(
            "{},{},{},{},{},{}",
            iteration, model_id, i, psis.elpd_i[i], wtd.weighted_elpd_i[i], psis.khat_i[i]
        ));
    }

    Ok(FitScores { records, loo_mean, wtd_mean: wtd.elpd_mean, is_sample, is_population, sae })
}

fn push_records(out: &mut IterationOutput, iteration: usize, model_id: &str, fs: &FitScores) {
    for (scope, criterion, value) in &fs.records {
        out.records.push(ScoreRecord {
            iteration,
            model_id: model_id.to_string(),
            scope: scope.clone(),
            criterion: criterion.clone(),
            value: *value,
        });
    }
}

/// Generate one replicate's population and sample.
fn prepare_iteration(
    cfg: &RunConfig,
    dspec: &DesignSpec,
    iteration: usize,
) -> Result<(Population, Sample)> {
    let pop = generate_population(dspec, &mut crate::rng::stream(cfg.seed, iteration as u64, "pop"))?;
    let sample =
        draw_sample(&pop, dspec, &mut crate::rng::stream(cfg.seed, iteration as u64, "sample"))?;
    Ok((pop, sample))
}

/// Rake the sample's weights to the population margins in place.
fn rake_iteration(pop: &Population, dspec: &DesignSpec, sample: &mut Sample) -> Result<()> {
    let margins = pop.level_margins(&dspec.levels_per_var);
    let raked = rake_weights(sample, &margins, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    sample.weights = raked.population_scale;
    Ok(())
}

fn record_counts(out: &mut IterationOutput, iteration: usize, sample: &Sample, dspec: &DesignSpec) {
    for var in 0..NUM_VARS {
        for level in 1..=dspec.levels_per_var[var] {
            let c = sample.x_level.iter().filter(|l| l[var] == level).count();
            out.counts.push(format!("{},{},{},{}", iteration, var + 1, level, c));
        }
    }
}

fn fit_seed(seed: u64, iteration: usize, model_id: &str) -> u64 {
    crate::rng::stream(seed, iteration as u64, &format!("fit:{model_id}")).gen()
}

/// Run design I: fit all 15 candidate models per replicate.
pub fn run_design1(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.design != 1 {
        return Err(Error::Config("run_design1 requires design = 1".into()));
    }
    run_iterations(cfg, |cfg, dspec, iteration, out| {
        let (pop, mut sample) = prepare_iteration(cfg, dspec, iteration)?;
        record_counts(out, iteration, &sample, dspec);
        match rake_iteration(&pop, dspec, &mut sample) {
            Ok(()) => {}
            Err(e @ (Error::RakingDiverged { .. } | Error::EmptyMarginLevel { .. })) => {
                // a degenerate replicate; record it and move on
                out.failures.push(format!("{iteration},-,{e}"));
                return Ok(());
            }
            Err(e) => return Err(e),
        }
        let table = build_table(&pop);
        for entry in enumerate_models(NUM_VARS) {
            let model_id = entry.spec.label();
            let seed = fit_seed(cfg.seed, iteration, &model_id);
            match score_fit(cfg, dspec, &pop, &sample, &table, entry.spec, seed, out, iteration)
            {
                Ok(fs) => push_records(out, iteration, &model_id, &fs),
                Err(e) => out.failures.push(format!("{iteration},{model_id},{e}")),
            }
        }
        Ok(())
    })
}

/// Run design II: fit the full model with and without the AR prior on X4
/// and record score differences per scope.
pub fn run_design2(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.design != 2 {
        return Err(Error::Config("run_design2 requires design = 2".into()));
    }
    run_iterations(cfg, |cfg, dspec, iteration, out| {
        let (pop, mut sample) = prepare_iteration(cfg, dspec, iteration)?;
        record_counts(out, iteration, &sample, dspec);
        match rake_iteration(&pop, dspec, &mut sample) {
            Ok(()) => {}
            Err(e @ (Error::RakingDiverged { .. } | Error::EmptyMarginLevel { .. })) => {
                out.failures.push(format!("{iteration},-,{e}"));
                return Ok(());
            }
            Err(e) => return Err(e),
        }
        let table = build_table(&pop);

        let exch = ModelSpec::new(&[0, 1, 2, 3], true)?;
        let ar = exch.clone().with_ar1_on(3)?;
        let fit = |spec: ModelSpec, out: &mut IterationOutput| {
            let model_id = spec.label();
            let seed = fit_seed(cfg.seed, iteration, &model_id);
            score_fit(cfg, dspec, &pop, &sample, &table, spec, seed, out, iteration)
                .map(|fs| (model_id, fs))
        };
        let (id_nonar, nonar) = match fit(exch, out) {
            Ok(v) => v,
            Err(e) => {
                out.failures.push(format!("{iteration},full,{e}"));
                return Ok(());
            }
        };
        let (id_ar, arfit) = match fit(ar, out) {
            Ok(v) => v,
            Err(e) => {
                out.failures.push(format!("{iteration},full_ar,{e}"));
                return Ok(());
            }
        };
        push_records(out, iteration, &id_nonar, &nonar);
        push_records(out, iteration, &id_ar, &arfit);

        let push_diff = |scope: &str, is_ar: f64, is_non: f64, loo_ar: f64, loo_non: f64,
                             wtd_ar: f64, wtd_non: f64, out: &mut IterationOutput| {
            let d_is = score_diff(is_ar, is_non, DiffKind::IntervalScore);
            let d_loo = score_diff(loo_ar, loo_non, DiffKind::Loo);
            let d_wtd = score_diff(wtd_ar, wtd_non, DiffKind::Loo);
            out.diffs.push(format!(
                "{},{},{},{},{},{},{}",
                iteration,
                scope,
                d_is,
                d_loo,
                d_wtd,
                diffs_agree(d_is, d_loo),
                diffs_agree(d_is, d_wtd)
            ));
        };

        push_diff(
            "individual_sample",
            arfit.is_sample,
            nonar.is_sample,
            arfit.loo_mean,
            nonar.loo_mean,
            arfit.wtd_mean,
            nonar.wtd_mean,
            out,
        );
        push_diff(
            "population",
            arfit.is_population,
            nonar.is_population,
            arfit.loo_mean,
            nonar.loo_mean,
            arfit.wtd_mean,
            nonar.wtd_mean,
            out,
        );
        // the 12 levels of X4
        for ((label, is_a, loo_a, wtd_a), (label_b, is_b, loo_b, wtd_b)) in
            arfit.sae.iter().zip(&nonar.sae)
        {
            debug_assert_eq!(label, label_b);
            if label.starts_with("sae:x4:") {
                push_diff(label, *is_a, *is_b, *loo_a, *loo_b, *wtd_a, *wtd_b, out);
            }
        }
        Ok(())
    })
}

/// Shared replicate loop: manifest handling, resumable per-iteration files,
/// and final merge.
fn run_iterations<F>(cfg: &RunConfig, mut body: F) -> Result<()>
where
    F: FnMut(&RunConfig, &DesignSpec, usize, &mut IterationOutput) -> Result<()>,
{
    let dspec = cfg.design_spec()?;
    let iter_dir = cfg.out_dir.join("iters");
    fs::create_dir_all(&iter_dir)?;
    write_manifest(cfg)?;

    for iteration in 0..cfg.iterations {
        let done_marker = iter_dir.join(format!("iter_{iteration:04}.records.csv"));
        if done_marker.exists() {
            continue;
        }
        let mut out = IterationOutput::default();
        body(cfg, &dspec, iteration, &mut out)?;
        flush_iteration(&iter_dir, iteration, &out)?;
        eprintln!("iteration {iteration} done ({} records)", out.records.len());
    }

    merge_outputs(cfg)?;
    Ok(())
}

fn write_atomic(path: &Path, content: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn flush_iteration(iter_dir: &Path, iteration: usize, out: &IterationOutput) -> Result<()> {
    let stem = format!("iter_{iteration:04}");
    let join = |rows: &[String], header: &str| {
        let mut s = String::from(header);
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    };
    write_atomic(
        &iter_dir.join(format!("{stem}.pointwise.csv")),
        &join(&out.pointwise, POINTWISE_HEADER),
    )?;
    if !out.diffs.is_empty() {
        write_atomic(&iter_dir.join(format!("{stem}.diffs.csv")), &join(&out.diffs, DIFFS_HEADER))?;
    }
    write_atomic(&iter_dir.join(format!("{stem}.counts.csv")), &join(&out.counts, COUNTS_HEADER))?;
    if !out.failures.is_empty() {
        write_atomic(
            &iter_dir.join(format!("{stem}.failures.csv")),
            &join(&out.failures, "iteration,model_id,error"),
        )?;
    }
    // records last: its presence marks the iteration complete
    let rows: Vec<String> = out.records.iter().map(ScoreRecord::csv_row).collect();
    write_atomic(&iter_dir.join(format!("{stem}.records.csv")), &join(&rows, RECORDS_HEADER))?;
    Ok(())
}

/// Refuse to mix results from different configurations in one directory.
fn write_manifest(cfg: &RunConfig) -> Result<()> {
    let path = cfg.out_dir.join("manifest.json");
    let hash = cfg.hash();
    if path.exists() {
        let existing: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path)?)?;
        if existing["config_hash"] != serde_json::Value::String(hash.clone()) {
            return Err(Error::Config(format!(
                "output directory {} holds results for a different configuration",
                cfg.out_dir.display()
            )));
        }
        return Ok(());
    }
    let manifest = serde_json::json!({
        "config": cfg,
        "config_hash": hash,
        "records_schema": RECORDS_HEADER,
        "pointwise_schema": POINTWISE_HEADER,
    });
    write_atomic(&path, &serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Concatenate per-iteration files into the merged top-level CSVs.
pub fn merge_outputs(cfg: &RunConfig) -> Result<()> {
    let iter_dir = cfg.out_dir.join("iters");
    let merge = |suffix: &str, header: &str, dest: &str| -> Result<()> {
        let mut body = String::from(header);
        body.push('\n');
        let mut names: Vec<PathBuf> = fs::read_dir(&iter_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().unwrap().to_string_lossy().ends_with(suffix))
            .collect();
        names.sort();
        let mut any = false;
        for p in names {
            let text = fs::read_to_string(p)?;
            for line in text.lines().skip(1) {
                body.push_str(line);
                body.push('\n');
                any = true;
            }
        }
        if any {
            write_atomic(&cfg.out_dir.join(dest), &body)?;
        }
        Ok(())
    };
    merge(".records.csv", RECORDS_HEADER, "records.csv")?;
    merge(".pointwise.csv", POINTWISE_HEADER, "pointwise.csv")?;
    merge(".diffs.csv", DIFFS_HEADER, "diffs.csv")?;
    merge(".counts.csv", COUNTS_HEADER, "counts.csv")?;
    merge(".failures.csv", "iteration,model_id,error", "failures.csv")?;
    Ok(())
}

// ---------------------------------------------------------------------------
// report generation

/// Parsed copy of a merged records.csv.
pub struct RecordStore {
    pub records: Vec<ScoreRecord>,
}

impl RecordStore {
    pub fn load(out_dir: &Path) -> Result<RecordStore> {
        let text = fs::read_to_string(out_dir.join("records.csv"))?;
        let mut records = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                continue;
            }
            records.push(ScoreRecord {
                iteration: f[0].parse().map_err(|_| Error::Config("bad records.csv".into()))?,
                model_id: f[1].to_string(),
                scope: f[2].to_string(),
                criterion: f[3].to_string(),
                value: f[4].parse().map_err(|_| Error::Config("bad records.csv".into()))?,
            });
        }
        Ok(RecordStore { records })
    }

    /// (iteration, model_id, value) triples for one scope and criterion.
    pub fn values(&self, scope: &str, criterion: &str) -> Vec<(usize, String, f64)> {
        self.records
            .iter()
            .filter(|r| r.scope == scope && r.criterion == criterion)
            .map(|r| (r.iteration, r.model_id.clone(), r.value))
            .collect()
    }

    /// Paired (criterion_a, criterion_b) points per model-iteration.
    pub fn pairs(&self, scope: &str, crit_a: &str, crit_b: &str) -> Vec<(f64, f64)> {
        let a = self.values(scope, crit_a);
        let b = self.values(scope, crit_b);
        let index: std::collections::HashMap<(usize, String), f64> =
            b.into_iter().map(|(i, m, v)| ((i, m), v)).collect();
        a.into_iter()
            .filter_map(|(i, m, v)| index.get(&(i, m.clone())).map(|w| (v, *w)))
            .collect()
    }

    /// Mean value per model group at one scope/criterion.
    pub fn group_means(&self, scope: &str, criterion: &str) -> Vec<(&'static str, f64)> {
        let mut sums: std::collections::HashMap<&'static str, (f64, usize)> = Default::default();
        for (_, model_id, v) in self.values(scope, criterion) {
            if let Some(g) = group_of_model_id(&model_id) {
                let e = sums.entry(g).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        let mut out: Vec<(&'static str, f64)> =
            sums.into_iter().map(|(g, (s, c))| (g, s / c as f64)).collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    /// Mean value per model at one scope/criterion.
    pub fn model_means(&self, scope: &str, criterion: &str) -> Vec<(String, f64)> {
        let mut sums: std::collections::HashMap<String, (f64, usize)> = Default::default();
        for (_, model_id, v) in self.values(scope, criterion) {
            let e = sums.entry(model_id).or_default();
            e.0 += v;
            e.1 += 1;
        }
        let mut out: Vec<(String, f64)> =
            sums.into_iter().map(|(m, (s, c))| (m, s / c as f64)).collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }
}

/// One row of a merged diffs.csv.
#[derive(Debug, Clone)]
pub struct DiffRecord {
    pub iteration: usize,
    pub scope: String,
    pub diff_is: f64,
    pub diff_loo: f64,
    pub diff_loo_wtd: f64,
}

pub fn load_diffs(out_dir: &Path) -> Result<Vec<DiffRecord>> {
    let text = fs::read_to_string(out_dir.join("diffs.csv"))?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() < 5 {
            continue;
        }
        out.push(DiffRecord {
            iteration: f[0].parse().map_err(|_| Error::Config("bad diffs.csv".into()))?,
            scope: f[1].to_string(),
            diff_is: f[2].parse().map_err(|_| Error::Config("bad diffs.csv".into()))?,
            diff_loo: f[3].parse().map_err(|_| Error::Config("bad diffs.csv".into()))?,
            diff_loo_wtd: f[4].parse().map_err(|_| Error::Config("bad diffs.csv".into()))?,
        });
    }
    Ok(out)
}

/// Mean per-iteration sample counts, keyed (var, level), from counts.csv.
pub fn mean_counts(out_dir: &Path) -> Result<Vec<(usize, usize, f64)>> {
    let text = fs::read_to_string(out_dir.join("counts.csv"))?;
    let mut sums: std::collections::BTreeMap<(usize, usize), (f64, usize)> = Default::default();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            continue;
        }
        let var: usize = f[1].parse().map_err(|_| Error::Config("bad counts.csv".into()))?;
        let level: usize = f[2].parse().map_err(|_| Error::Config("bad counts.csv".into()))?;
        let c: f64 = f[3].parse().map_err(|_| Error::Config("bad counts.csv".into()))?;
        let e = sums.entry((var, level)).or_default();
        e.0 += c;
        e.1 += 1;
    }
    Ok(sums.into_iter().map(|((v, l), (s, n))| (v, l, s / n as f64)).collect())
}

// minimal hand-rolled SVG scatter plot
struct SvgPlot {
    width: f64,
    height: f64,
    margin: f64,
    body: String,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl SvgPlot {
    fn new(points: &[(f64, f64)]) -> SvgPlot {
        let pad = |lo: f64, hi: f64| {
            let span = (hi - lo).max(1e-12);
            (lo - 0.05 * span, hi + 0.05 * span)
        };
        let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        let fold = |v: &[f64], init: f64, f: fn(f64, f64) -> f64| v.iter().cloned().fold(init, f);
        let x_range = pad(fold(&xs, f64::INFINITY, f64::min), fold(&xs, f64::NEG_INFINITY, f64::max));
        let y_range = pad(fold(&ys, f64::INFINITY, f64::min), fold(&ys, f64::NEG_INFINITY, f64::max));
        SvgPlot { width: 480.0, height: 360.0, margin: 50.0, body: String::new(), x_range, y_range }
    }

    fn sx(&self, x: f64) -> f64 {
        self.margin
            + (x - self.x_range.0) / (self.x_range.1 - self.x_range.0)
                * (self.width - 2.0 * self.margin)
    }

    fn sy(&self, y: f64) -> f64 {
        self.height
            - self.margin
            - (y - self.y_range.0) / (self.y_range.1 - self.y_range.0)
                * (self.height - 2.0 * self.margin)
    }

    fn circle(&mut self, x: f64, y: f64, color: &str) {
        let (cx, cy) = (self.sx(x), self.sy(y));
        self.body.push_str(&format!(
            "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"2.5\" fill=\"{color}\" \
             fill-opacity=\"0.6\"/>\n"
        ));
    }

    fn vline(&mut self, x: f64, color: &str) {
        if x < self.x_range.0 || x > self.x_range.1 {
            return;
        }
        let sx = self.sx(x);
        self.body.push_str(&format!(
            "<line x1=\"{sx:.1}\" y1=\"{}\" x2=\"{sx:.1}\" y2=\"{}\" stroke=\"{color}\" \
             stroke-dasharray=\"4 3\"/>\n",
            self.margin,
            self.height - self.margin
        ));
    }

    fn hline(&mut self, y: f64, color: &str) {
        if y < self.y_range.0 || y > self.y_range.1 {
            return;
        }
        let sy = self.sy(y);
        self.body.push_str(&format!(
            "<line x1=\"{}\" y1=\"{sy:.1}\" x2=\"{}\" y2=\"{sy:.1}\" stroke=\"{color}\" \
             stroke-dasharray=\"4 3\"/>\n",
            self.margin,
            self.width - self.margin
        ));
    }

    fn finish(self, title: &str, x_label: &str, y_label: &str) -> String {
        let (w, h, m) = (self.width, self.height, self.margin);
        let axis = format!(
            "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" \
             stroke=\"black\"/>\n",
            w - 2.0 * m,
            h - 2.0 * m
        );
        let labels = format!(
            "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{x_label}</text>\n\
             <text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" \
             transform=\"rotate(-90 14 {})\">{y_label}</text>\n\
             <text x=\"{m}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-size=\"10\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{}\" font-size=\"10\">{:.3}</text>\n",
            w / 2.0,
            w / 2.0,
            h - 12.0,
            h / 2.0,
            h / 2.0,
            h - m + 14.0,
            self.x_range.0,
            w - m,
            h - m + 14.0,
            self.x_range.1,
            m - 44.0,
            h - m,
            self.y_range.0,
            m - 44.0,
            m + 8.0,
            self.y_range.1,
        );
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
             viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
             {axis}{labels}{}</svg>\n",
            self.body
        )
    }
}

const GROUP_COLORS: [(&str, &str); 4] = [
    ("bias-precision", "#1b9e77"),
    ("bias-only", "#d95f02"),
    ("precision-only", "#7570b3"),
    ("irrelevant", "#666666"),
];

fn group_color(model_id: &str) -> &'static str {
    let g = group_of_model_id(model_id).unwrap_or("irrelevant");
    GROUP_COLORS.iter().find(|(k, _)| *k == g).map(|(_, c)| *c).unwrap_or("#666666")
}

fn scatter_by_model(
    store: &RecordStore,
    scope: &str,
    crit_x: &str,
    crit_y: &str,
    title: &str,
) -> Option<(String, String)> {
    let xs = store.values(scope, crit_x);
    let ys = store.values(scope, crit_y);
    if xs.is_empty() || ys.is_empty() {
        return None;
    }
    let index: std::collections::HashMap<(usize, String), f64> =
        ys.into_iter().map(|(i, m, v)| ((i, m), v)).collect();
    let mut pts = Vec::new();
    let mut csv = format!("iteration,model_id,{crit_x},{crit_y}\n");
    for (i, m, x) in xs {
        if let Some(&y) = index.get(&(i, m.clone())) {
            csv.push_str(&format!("{i},{m},{x},{y}\n"));
            pts.push((x, y, group_color(&m)));
        }
    }
    let mut plot = SvgPlot::new(&pts.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>());
    for (x, y, c) in &pts {
        plot.circle(*x, *y, c);
    }
    Some((plot.finish(title, crit_x, crit_y), csv))
}

fn quadrant_plot(diffs: &[DiffRecord], scopes: &[&str], title: &str) -> Option<(String, String)> {
    let pts: Vec<&DiffRecord> =
        diffs.iter().filter(|d| scopes.contains(&d.scope.as_str())).collect();
    if pts.is_empty() {
        return None;
    }
    let xy: Vec<(f64, f64)> = pts.iter().map(|d| (d.diff_is, d.diff_loo)).collect();
    let mut plot = SvgPlot::new(&xy);
    plot.vline(0.0, "#888888");
    plot.hline(0.0, "#888888");
    let mut csv = String::from("iteration,scope,diff_is,diff_loo,agree\n");
    for d in &pts {
        let agree = diffs_agree(d.diff_is, d.diff_loo);
        let color = if agree { "#1b9e77" } else { "#d53e4f" };
        plot.circle(d.diff_is, d.diff_loo, color);
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            d.iteration, d.scope, d.diff_is, d.diff_loo, agree
        ));
    }
    Some((plot.finish(title, "diff_IS", "diff_LOO"), csv))
}

/// Build figures, per-figure point CSVs, and the correlation summary table
/// from the merged outputs in `out_dir`. Missing inputs are noted in
/// `report_notes.txt` rather than failing.
pub fn emit_reports(out_dir: &Path) -> Result<()> {
    let figs = out_dir.join("figs");
    fs::create_dir_all(&figs)?;
    let mut notes = Vec::new();

    let store = match RecordStore::load(out_dir) {
        Ok(s) => Some(s),
        Err(_) => {
            notes.push("records.csv missing or unreadable; score figures skipped".to_string());
            None
        }
    };

    if let Some(store) = &store {
        let panels = [
            ("fig2_individual_sample_psis", "individual_sample", "IS", "PSIS_LOO",
             "Individual (sample): interval score vs PSIS-LOO"),
            ("fig2_individual_sample_wtd", "individual_sample", "IS", "WTD_PSIS_LOO",
             "Individual (sample): interval score vs WTD-PSIS-LOO"),
            ("fig2_individual_population_psis", "individual_population", "IS", "PSIS_LOO",
             "Individual (population): interval score vs PSIS-LOO"),
            ("fig2_individual_population_wtd", "individual_population", "IS", "WTD_PSIS_LOO",
             "Individual (population): interval score vs WTD-PSIS-LOO"),
            ("fig3_population_psis", "population", "IS", "PSIS_LOO",
             "MRP estimand: interval score vs PSIS-LOO"),
            ("fig3_population_wtd", "population", "IS", "WTD_PSIS_LOO",
             "MRP estimand: interval score vs WTD-PSIS-LOO"),
            ("fig4_sae_x2_5", "sae:x2:5", "IS", "WTD_PSIS_LOO",
             "Small area X2 level 5: interval score vs WTD-PSIS-LOO"),
            ("fig4_sae_x4_5", "sae:x4:5", "IS", "WTD_PSIS_LOO",
             "Small area X4 level 5: interval score vs WTD-PSIS-LOO"),
        ];
        let mut correlations = String::from("scope,criterion,pearson,mean_spearman\n");
        for (name, scope, cx, cy, title) in panels {
            match scatter_by_model(store, scope, cx, cy, title) {
                Some((svg, csv)) => {
                    write_atomic(&figs.join(format!("{name}.svg")), &svg)?;
                    write_atomic(&figs.join(format!("{name}_points.csv")), &csv)?;
                }
                None => notes.push(format!("no data for {name} ({scope})")),
            }
            if let Some(line) = correlation_line(store, scope, cx, cy) {
                correlations.push_str(&line);
            }
        }
        write_atomic(&out_dir.join("correlations.csv"), &correlations)?;

        let mut group_means = String::from("scope,criterion,group,mean\n");
        for scope in ["individual_sample", "individual_population", "population", "sae:x2:5",
            "sae:x4:5"]
        {
            for crit in ["IS", "PSIS_LOO", "WTD_PSIS_LOO"] {
                for (g, m) in store.group_means(scope, crit) {
                    group_means.push_str(&format!("{scope},{crit},{g},{m}\n"));
                }
            }
        }
        write_atomic(&out_dir.join("group_means.csv"), &group_means)?;
    }

    match load_diffs(out_dir) {
        Ok(diffs) if !diffs.is_empty() => {
            let x4_scopes: Vec<String> = (1..=12).map(|l| format!("sae:x4:{l}")).collect();
            let x4_refs: Vec<&str> = x4_scopes.iter().map(|s| s.as_str()).collect();
            let quads = [
                ("fig5_individual", vec!["individual_sample"],
                 "Design II individual level: diff_IS vs diff_LOO"),
                ("fig6_population", vec!["population"],
                 "Design II MRP estimand: diff_IS vs diff_LOO"),
                ("fig7_x4_levels", x4_refs.clone(),
                 "Design II X4 levels: diff_IS vs diff_LOO"),
            ];
            for (name, scopes, title) in quads {
                match quadrant_plot(&diffs, &scopes, title) {
                    Some((svg, csv)) => {
                        write_atomic(&figs.join(format!("{name}.svg")), &svg)?;
                        write_atomic(&figs.join(format!("{name}_points.csv")), &csv)?;
                    }
                    None => notes.push(format!("no data for {name}")),
                }
            }
            // agreement fraction per X4 level
            let mut agreement = String::from("scope,n,agree_fraction\n");
            for scope in &x4_scopes {
                let pts: Vec<&DiffRecord> = diffs.iter().filter(|d| &d.scope == scope).collect();
                if pts.is_empty() {
                    continue;
                }
                let agree = pts.iter().filter(|d| diffs_agree(d.diff_is, d.diff_loo)).count();
                agreement.push_str(&format!(
                    "{scope},{},{}\n",
                    pts.len(),
                    agree as f64 / pts.len() as f64
                ));
            }
            write_atomic(&out_dir.join("agreement_by_level.csv"), &agreement)?;
        }
        _ => notes.push("diffs.csv missing; design II quadrant figures skipped".to_string()),
    }

    match mean_counts(out_dir) {
        Ok(counts) => {
            let mut s = String::from("var,level,mean_count\n");
            for (v, l, c) in counts {
                s.push_str(&format!("{v},{l},{c}\n"));
            }
            write_atomic(&out_dir.join("mean_group_sizes.csv"), &s)?;
        }
        Err(_) => notes.push("counts.csv missing; group-size table skipped".to_string()),
    }

    if !notes.is_empty() {
        let mut f = fs::File::create(out_dir.join("report_notes.txt"))?;
        for n in &notes {
            writeln!(f, "{n}")?;
        }
    }
    Ok(())
}

fn correlation_line(store: &RecordStore, scope: &str, cx: &str, cy: &str) -> Option<String> {
    let pairs = store.pairs(scope, cx, cy);
    let pearson = crate::scoring::criterion_correlation(&pairs).ok()?;
    // secondary diagnostic: Spearman within each iteration, averaged
    let mut by_iter: std::collections::HashMap<usize, Vec<(f64, f64)>> = Default::default();
    let xs = store.values(scope, cx);
    let index: std::collections::HashMap<(usize, String), f64> = store
        .values(scope, cy)
        .into_iter()
        .map(|(i, m, v)| ((i, m), v))
        .collect();
    for (i, m, v) in xs {
        if let Some(&w) = index.get(&(i, m)) {
            by_iter.entry(i).or_default().push((v, w));
        }
    }
    let mut spearmans = Vec::new();
    for pts in by_iter.values() {
        if let Ok(r) = crate::scoring::spearman_correlation(pts) {
            spearmans.push(r);
        }
    }
    let mean_sp = if spearmans.is_empty() {
        f64::NAN
    } else {
        crate::math::mean(&spearmans)
    };
    Some(format!("{scope},{cy},{pearson},{mean_sp}\n"))
}
