//! Command-line front end: simulation, single fits, LOO scoring, and the
//! two replicated experiment designs.

use clap::{Args, Parser, Subcommand};
use mrploo::harness::{
    emit_reports, RunConfig, Variant, ALPHA,
};
use mrploo::inference::{pointwise_loglik, sample_posterior, ModelSpec, SamplerConfig};
use mrploo::loo::{elpd_psis_loo, elpd_wtd_psis_loo};
use mrploo::raking::{rake_weights, DEFAULT_MAX_ITER, DEFAULT_TOL};
use mrploo::scoring::interval_score;
use mrploo::sim::{draw_sample, generate_population, DesignSpec, Sample};
use mrploo::{Error, Result};
use std::fs;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "mrploo",
    about = "MRP model comparison experiments: PSIS-LOO, WTD-PSIS-LOO, and interval scores"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the run subcommands; every flag overrides the
/// corresponding config-file key.
#[derive(Args, Debug, Clone)]
struct RunArgs {
    /// TOML config file; flags below override its keys
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of replicate iterations
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    n_pop: Option<usize>,
    #[arg(long)]
    n_sample: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    /// Post-warmup draws per chain
    #[arg(long)]
    draws: Option<usize>,
    /// Warmup iterations per chain
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// base, x2strong, x4strong, or n1000
    #[arg(long)]
    variant: Option<String>,
}

impl RunArgs {
    fn into_config(self, design: u8) -> Result<RunConfig> {
        let mut cfg = match self.config {
            Some(path) => RunConfig::from_toml_file(&path)?,
            None => {
                let out = self
                    .out_dir
                    .clone()
                    .ok_or_else(|| Error::Config("--out-dir or --config required".into()))?;
                if design == 1 {
                    RunConfig::defaults_design1(out)
                } else {
                    RunConfig::defaults_design2(out)
                }
            }
        };
        cfg.design = design;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.iterations {
            cfg.iterations = v;
        }
        if let Some(v) = self.n_pop {
            cfg.n_pop = v;
        }
        if let Some(v) = self.n_sample {
            cfg.n_sample = v;
        }
        if let Some(v) = self.chains {
            cfg.chains = v;
        }
        if let Some(v) = self.draws {
            cfg.draws = v;
        }
        if let Some(v) = self.warmup {
            cfg.warmup = v;
        }
        if let Some(v) = self.out_dir {
            cfg.out_dir = v;
        }
        if let Some(v) = self.variant {
            cfg.variant = v.parse::<Variant>()?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate one population and sample, write population.csv / sample.csv
    Simulate {
        /// 1 or 2
        #[arg(long, default_value_t = 1)]
        design: u8,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        n_pop: Option<usize>,
        #[arg(long)]
        n_sample: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Also rake the sample weights to the population margins
        #[arg(long, default_value_t = true)]
        rake: bool,
    },
    /// Fit one model to a sample CSV and write posterior draws + pointwise
    /// log-likelihoods
    Fit {
        /// sample.csv produced by `simulate`
        #[arg(long)]
        sample: PathBuf,
        /// Model id such as x2, x2_x4, or x1_x2_x3_x4ar (suffix `ar` puts an
        /// AR prior on that variable)
        #[arg(long)]
        model: String,
        /// 1 or 2 (sets the levels per variable)
        #[arg(long, default_value_t = 1)]
        design: u8,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        chains: usize,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long, default_value_t = 500)]
        warmup: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// PSIS-LOO and WTD-PSIS-LOO from a pointwise log-likelihood CSV
    Loo {
        /// loglik.csv produced by `fit` (rows = draws, columns = units)
        #[arg(long)]
        loglik: PathBuf,
        /// sample.csv carrying the raked weights for the weighted variant
        #[arg(long)]
        sample: Option<PathBuf>,
    },
    /// Interval score of one 90% (or custom) interval against an observation
    Score {
        #[arg(long)]
        lower: f64,
        #[arg(long)]
        upper: f64,
        /// Realized value
        #[arg(long)]
        x: f64,
        #[arg(long, default_value_t = ALPHA)]
        alpha: f64,
    },
    /// Replicated design I experiment (15-model comparison)
    RunDesign1(RunArgs),
    /// Replicated design II experiment (AR vs exchangeable prior)
    RunDesign2(RunArgs),
    /// Rebuild figures and summary tables from a run directory
    Report {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn parse_model_id(id: &str, design: u8) -> Result<ModelSpec> {
    let mut vars = Vec::new();
    let mut ar_vars = Vec::new();
    for part in id.split('_') {
        let (name, ar) = match part.strip_suffix("ar") {
            Some(base) => (base, true),
            None => (part, false),
        };
        let var: usize = name
            .strip_prefix('x')
            .and_then(|d| d.parse::<usize>().ok())
            .filter(|v| (1..=4).contains(v))
            .ok_or_else(|| Error::Config(format!("bad model id component '{part}'")))?;
        vars.push(var - 1);
        if ar {
            ar_vars.push(var - 1);
        }
    }
    // design II models carry a fixed intercept, matching its data process
    let mut spec = ModelSpec::new(&vars, design == 2)?;
    for v in ar_vars {
        spec = spec.with_ar1_on(v)?;
    }
    Ok(spec)
}

fn design_spec_for(design: u8, n_pop: usize, n_sample: usize, seed: u64) -> Result<DesignSpec> {
    match design {
        1 => Ok(DesignSpec::design1(n_pop, n_sample, seed)),
        2 => Ok(DesignSpec::design2(n_pop, n_sample, seed)),
        d => Err(Error::Config(format!("design must be 1 or 2, got {d}"))),
    }
}

fn cmd_simulate(
    design: u8,
    seed: u64,
    n_pop: Option<usize>,
    n_sample: Option<usize>,
    out_dir: PathBuf,
    rake: bool,
) -> Result<()> {
    let (def_pop, def_n) = if design == 1 { (10_000, 1000) } else { (10_000, 500) };
    let spec = design_spec_for(design, n_pop.unwrap_or(def_pop), n_sample.unwrap_or(def_n), seed)?;
    let pop = generate_population(&spec, &mut mrploo::rng::stream(seed, 0, "pop"))?;
    let mut sample = draw_sample(&pop, &spec, &mut mrploo::rng::stream(seed, 0, "sample"))?;
    if rake {
        let margins = pop.level_margins(&spec.levels_per_var);
        let raked = rake_weights(&sample, &margins, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
        sample.weights = raked.population_scale;
    }
    fs::create_dir_all(&out_dir)?;
    pop.write_csv(fs::File::create(out_dir.join("population.csv"))?)?;
    sample.write_csv(fs::File::create(out_dir.join("sample.csv"))?)?;
    println!(
        "wrote {} population rows and {} sample rows to {}",
        pop.len(),
        sample.len(),
        out_dir.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_fit(
    sample_path: PathBuf,
    model: String,
    design: u8,
    seed: u64,
    chains: usize,
    draws: usize,
    warmup: usize,
    out_dir: PathBuf,
) -> Result<()> {
    let sample = Sample::read_csv(fs::File::open(&sample_path)?)?;
    let spec = parse_model_id(&model, design)?;
    let levels = design_spec_for(design, 1, 1, seed)?.levels_per_var;
    let cfg = SamplerConfig { chains, warmup, draws, seed, ..SamplerConfig::default() };
    let posterior = sample_posterior(&sample, spec, &levels, &cfg)?;

    fs::create_dir_all(&out_dir)?;
    posterior.write_csv(fs::File::create(out_dir.join("draws.csv"))?)?;
    let loglik = pointwise_loglik(&posterior, &sample)?;
    let mut f = std::io::BufWriter::new(fs::File::create(out_dir.join("loglik.csv"))?);
    {
        use std::io::Write;
        let header: Vec<String> = (0..sample.len()).map(|i| format!("unit_{i}")).collect();
        writeln!(f, "{}", header.join(","))?;
        for row in &loglik {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(f, "{}", cells.join(","))?;
        }
    }
    let d = &posterior.diagnostics;
    println!(
        "fit {model}: {} draws, max R-hat {:.4}, min ESS {:.0}, divergences {}",
        posterior.num_draws(),
        d.max_rhat(),
        d.min_ess(),
        d.divergences
    );
    Ok(())
}

fn cmd_loo(loglik_path: PathBuf, sample_path: Option<PathBuf>) -> Result<()> {
    let text = fs::read_to_string(&loglik_path)?;
    let mut loglik: Vec<Vec<f64>> = Vec::new();
    for line in text.lines().skip(1) {
        let row = line
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|_| Error::Config("bad loglik.csv".into()))?;
        loglik.push(row);
    }
    let psis = elpd_psis_loo(&loglik)?;
    println!(
        "PSIS-LOO elpd = {:.4} over {} units; {:.1}% of k-hat > 0.7",
        psis.elpd,
        psis.elpd_i.len(),
        100.0 * psis.high_khat_fraction
    );
    if let Some(path) = sample_path {
        let sample = Sample::read_csv(fs::File::open(path)?)?;
        let wtd = elpd_wtd_psis_loo(&loglik, &sample.weights)?;
        println!(
            "WTD-PSIS-LOO mean = {:.6}, sum scale = {:.4}",
            wtd.elpd_mean, wtd.elpd_sum
        );
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { design, seed, n_pop, n_sample, out_dir, rake } => {
            cmd_simulate(design, seed, n_pop, n_sample, out_dir, rake)
        }
        Command::Fit { sample, model, design, seed, chains, draws, warmup, out_dir } => {
            cmd_fit(sample, model, design, seed, chains, draws, warmup, out_dir)
        }
        Command::Loo { loglik, sample } => cmd_loo(loglik, sample),
        Command::Score { lower, upper, x, alpha } => {
            interval_score(lower, upper, x, alpha).map(|s| println!("{s}"))
        }
        Command::RunDesign1(args) => args
            .into_config(1)
            .and_then(|cfg| mrploo::harness::run_design1(&cfg).map(|()| cfg.out_dir))
            .and_then(|dir| emit_reports(&dir)),
        Command::RunDesign2(args) => args
            .into_config(2)
            .and_then(|cfg| mrploo::harness::run_design2(&cfg).map(|()| cfg.out_dir))
            .and_then(|dir| emit_reports(&dir)),
        Command::Report { out_dir } => emit_reports(&out_dir),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
