//! Command-line front end: `tensorstick {fit|predict|cv|simulate}`.
//!
//! Settings come from an optional TOML file (`--config`) with sections
//! `[model]`, `[chain]`, `[cv]` and `[simulate]`; flags override the file.
//! All randomness derives from `--seed`. Exit codes: 0 success, 2 input
//! error, 3 numeric failure, 4 invariant violation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::baselines::{logistic_predictive_lppl, LogisticConfig, LogisticVariant};
use crate::data::{read_covariates, Dataset};
use crate::error::{Error, Result};
use crate::gibbs::{run_chain, ChainConfig};
use crate::model::{CoefStructure, Coefficients, ErrorStructure, ModelConfig};
use crate::predictive::{cross_validate, summarize_profile, CvOptions, CvReport, PredictiveModel};
use crate::sampling::RngHandle;
use crate::simstudy::{desk_settings, generate, run_grid, GridPreset, GridSpec, SimDesign};
use crate::store::{config_hash, DrawStore};

#[derive(Debug, Parser)]
#[command(name = "tensorstick", version, about = "Probit stick-breaking mixtures for clustered binomial data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit one chain and write the draws plus a posterior summary.
    Fit(FitArgs),
    /// Predictive distributions for new covariate profiles.
    Predict(PredictArgs),
    /// K-fold cross-validated LPPL and predictive quantiles.
    Cv(CvArgs),
    /// Generate a simulated dataset or run a comparison grid.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for folds and grid cells.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output path.
    #[arg(long)]
    out: PathBuf,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
struct ModelFlags {
    /// Truncation level H.
    #[arg(long)]
    h: Option<usize>,
    /// Coefficient structure: none, shared_types, full or low_rank(R).
    #[arg(long)]
    coef: Option<CoefStructure>,
    /// Random-effect structure: none or low_rank(R).
    #[arg(long)]
    error: Option<ErrorStructure>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// Keep latent probits in the stored draws.
    #[arg(long)]
    store_latents: bool,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    /// Long-format outcomes: subject,type,y,n.
    #[arg(long)]
    outcomes: PathBuf,
    /// Wide-format covariates: subject,<names...>.
    #[arg(long)]
    covariates: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    common: Common,
    /// Draw-store directory written by `fit`.
    #[arg(long)]
    draws: PathBuf,
    /// Covariate profiles, one row per profile, with the fit's covariate header.
    #[arg(long)]
    profiles: PathBuf,
    /// Trials per type, comma separated.
    #[arg(long, value_delimiter = ',')]
    trials: Vec<u64>,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    outcomes: PathBuf,
    #[arg(long)]
    covariates: PathBuf,
    /// Number of folds.
    #[arg(long)]
    folds: Option<usize>,
    /// Score a logistic comparator instead of the stick-breaking model.
    #[arg(long)]
    logistic: Option<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    model: ModelFlags,
    /// logistic, lowrank_psb or fullrank_psb.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    subjects: Option<usize>,
    /// Trials per type, comma separated.
    #[arg(long, value_delimiter = ',')]
    trials: Vec<u64>,
    /// Run the comparison grid on the generated design.
    #[arg(long)]
    grid: bool,
    /// Named grid preset: table2-desk, table3-desk or table4-desk.
    #[arg(long)]
    preset: Option<String>,
    /// Realization seed for a preset; defaults to the preset's own.
    #[arg(long)]
    design_seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    replications: Option<usize>,
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    chain: ChainConfig,
    cv: CvFile,
    simulate: Option<SimDesign>,
    seed: Option<u64>,
    jobs: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CvFile {
    folds: usize,
    replications: usize,
}

impl Default for CvFile {
    fn default() -> Self {
        Self { folds: 10, replications: 1 }
    }
}

fn load_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(FileConfig::default()) };
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

struct Resolved {
    model: ModelConfig,
    chain: ChainConfig,
    seed: u64,
    jobs: usize,
    file: FileConfig,
}

fn resolve(common: &Common, flags: &ModelFlags) -> Result<Resolved> {
    let file = load_config(common.config.as_deref())?;
    let mut model = file.model.clone();
    let mut chain = file.chain.clone();
    if let Some(h) = flags.h {
        model.h = h;
    }
    if let Some(c) = flags.coef {
        model.coef = c;
    }
    if let Some(e) = flags.error {
        model.error = e;
    }
    if let Some(v) = flags.iterations {
        chain.iterations = v;
    }
    if let Some(v) = flags.burn_in {
        chain.burn_in = v;
    }
    if let Some(v) = flags.thin {
        chain.thin = v;
    }
    if flags.store_latents {
        chain.store_latents = true;
    }
    let seed = common.seed.or(file.seed).unwrap_or(chain.seed);
    chain.seed = seed;
    let jobs = common.jobs.or(file.jobs).unwrap_or(1);
    model.validate()?;
    chain.validate()?;
    Ok(Resolved { model, chain, seed, jobs, file })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Posterior mean and equal-tailed 95% interval.
#[derive(Debug, Clone, Serialize)]
struct Interval {
    mean: f64,
    lower: f64,
    upper: f64,
}

fn interval(mut v: Vec<f64>) -> Interval {
    v.sort_by(f64::total_cmp);
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let q = |p: f64| crate::predictive::sample_quantile(&v, p);
    Interval { mean, lower: q(0.025), upper: q(0.975) }
}

#[derive(Debug, Serialize)]
struct Loading {
    name: String,
    component: usize,
    #[serde(flatten)]
    interval: Interval,
}

#[derive(Debug, Serialize)]
struct FitSummary {
    seed: u64,
    config_hash: String,
    dataset_hash: String,
    model: ModelConfig,
    chain: ChainConfig,
    draws: usize,
    alpha: Option<Interval>,
    sigma2: Vec<Interval>,
    /// Covariate loadings B1, each column's sign aligned to a positive sum.
    covariate_loadings: Vec<Loading>,
    /// Type loadings B2, aligned the same way.
    type_loadings: Vec<Loading>,
    mean_loglik: Option<f64>,
}

fn summarize_fit(store: &DrawStore) -> Result<FitSummary> {
    let meta = store.meta();
    let draws = store.draws();
    let model = store.model()?;
    let mut summary = FitSummary {
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        dataset_hash: meta.dataset_hash.clone(),
        model: model.clone(),
        chain: meta.chain.clone(),
        draws: draws.len(),
        alpha: None,
        sigma2: Vec::new(),
        covariate_loadings: Vec::new(),
        type_loadings: Vec::new(),
        mean_loglik: None,
    };
    if draws.is_empty() {
        return Ok(summary);
    }
    summary.alpha = Some(interval(draws.iter().map(|s| s.alpha).collect()));
    summary.sigma2 = (0..model.effect_rank()).map(|r| interval(draws.iter().map(|s| s.sigma2[r]).collect())).collect();
    summary.mean_loglik = Some(store.loglik().iter().sum::<f64>() / store.loglik().len() as f64);
    if let CoefStructure::LowRank(rank) = model.coef {
        let (d, j) = (meta.n_covariates(), meta.n_types());
        let mut b1 = vec![vec![Vec::with_capacity(draws.len()); rank]; d];
        let mut b2 = vec![vec![Vec::with_capacity(draws.len()); rank]; j];
        for s in draws {
            let Coefficients::LowRank(f) = &s.coef else {
                return Err(Error::Invariant("stored coefficients are not low-rank".into()));
            };
            for r in 0..rank {
                // Flipping any two of B1, B2, B3 leaves the product unchanged.
                let sign1 = if f.f1.column(r).sum() < 0.0 { -1.0 } else { 1.0 };
                let sign = if f.f2.column(r).sum() < 0.0 { -1.0 } else { 1.0 };
                for k in 0..d {
                    b1[k][r].push(sign1 * f.f1[(k, r)]);
                }
                for t in 0..j {
                    b2[t][r].push(sign * f.f2[(t, r)]);
                }
            }
        }
        for (k, cols) in b1.into_iter().enumerate() {
            for (r, v) in cols.into_iter().enumerate() {
                summary.covariate_loadings.push(Loading {
                    name: meta.covariate_names[k].clone(),
                    component: r + 1,
                    interval: interval(v),
                });
            }
        }
        for (t, cols) in b2.into_iter().enumerate() {
            for (r, v) in cols.into_iter().enumerate() {
                summary.type_loadings.push(Loading { name: meta.type_names[t].clone(), component: r + 1, interval: interval(v) });
            }
        }
    }
    Ok(summary)
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let cfg = resolve(&args.common, &args.model)?;
    let data = Dataset::load_csv(&args.outcomes, &args.covariates)?;
    let store = run_chain(&cfg.chain, &cfg.model, &data)?;
    store.save(&args.common.out)?;
    write_json(&args.common.out.join("summary.json"), &summarize_fit(&store)?)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct PredictOutput {
    seed: u64,
    config_hash: String,
    fit_seed: u64,
    profiles: Vec<crate::predictive::ProfileSummary>,
}

fn cmd_predict(args: PredictArgs) -> Result<()> {
    let file = load_config(args.common.config.as_deref())?;
    let seed = args.common.seed.or(file.seed).unwrap_or(1);
    let store = DrawStore::load(&args.draws)?;
    let meta = store.meta();
    if store.draws().is_empty() {
        return Err(Error::input("draw store holds no retained draws"));
    }
    let (_, names, rows) = read_covariates(&args.profiles)?;
    if names.len() != meta.n_covariates() {
        return Err(Error::input(format!(
            "profiles have {} covariates, the fit used {}",
            names.len(),
            meta.n_covariates()
        )));
    }
    if args.trials.len() != meta.n_types() {
        return Err(Error::input(format!("{} trial counts for {} types", args.trials.len(), meta.n_types())));
    }
    let mut rng = RngHandle::new(seed);
    let mut profiles = Vec::with_capacity(rows.len());
    for (k, row) in rows.iter().enumerate() {
        let p = store.predictive_probs(&mut rng, row)?;
        profiles.push(summarize_profile(&mut rng, k, row, &p, &args.trials, &meta.type_names)?);
    }
    let out = PredictOutput { seed, config_hash: meta.config_hash.clone(), fit_seed: meta.seed, profiles };
    write_json(&args.common.out, &out)
}

#[derive(Debug, Serialize)]
struct CvOutput<'a> {
    seed: u64,
    config_hash: String,
    dataset_hash: String,
    family: String,
    model: serde_json::Value,
    chain: &'a ChainConfig,
    report: &'a CvReport,
}

fn cmd_cv(args: CvArgs) -> Result<()> {
    let cfg = resolve(&args.common, &args.model)?;
    let data = Dataset::load_csv(&args.outcomes, &args.covariates)?;
    let opts = CvOptions { k: args.folds.unwrap_or(cfg.file.cv.folds), seed: cfg.seed, jobs: cfg.jobs };
    let (report, family, model_json, hash) = match &args.logistic {
        Some(v) => {
            let lc = LogisticConfig::new(v.parse::<LogisticVariant>()?);
            let rep = logistic_predictive_lppl(&lc, &cfg.chain, &data, &opts)?;
            (rep, "logistic", serde_json::to_value(&lc)?, config_hash(&lc, &cfg.chain))
        }
        None => {
            let rep = cross_validate(&cfg.model, &cfg.chain, &data, &opts)?;
            (rep, "psb", serde_json::to_value(&cfg.model)?, config_hash(&cfg.model, &cfg.chain))
        }
    };
    fs::create_dir_all(&args.common.out)?;
    let out = CvOutput {
        seed: cfg.seed,
        config_hash: hash,
        dataset_hash: data.hash(),
        family: family.to_string(),
        model: model_json,
        chain: &cfg.chain,
        report: &report,
    };
    write_json(&args.common.out.join("cv_report.json"), &out)?;
    report.write_cells_csv(&args.common.out.join("cv_quantiles.csv"))?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SimOutput<'a> {
    seed: u64,
    config_hash: String,
    dataset_hash: String,
    design: &'a SimDesign,
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let cfg = resolve(&args.common, &args.model)?;
    let out = &args.common.out;
    fs::create_dir_all(out)?;
    if let Some(name) = &args.preset {
        let preset: GridPreset = name.parse()?;
        let mut design = preset.design();
        if let Some(seed) = args.design_seed {
            design.seed = seed;
        }
        let (chain, cv) = desk_settings(cfg.seed, cfg.jobs);
        let table = run_grid(&design, &GridSpec::default(), &chain, &cv, args.replications.unwrap_or(1))?;
        return write_grid(out, &table);
    }
    let mut design = cfg.file.simulate.clone().unwrap_or_default();
    if let Some(k) = &args.kind {
        design.kind = k.parse()?;
    }
    if let Some(n) = args.subjects {
        design.n_subjects = n;
    }
    if !args.trials.is_empty() {
        design.trials = args.trials.clone();
    }
    design.seed = cfg.seed;
    let (data, _) = generate(&design)?;
    data.write_csv(&out.join("outcomes.csv"), &out.join("covariates.csv"))?;
    let hash = config_hash(&design, &cfg.chain);
    write_json(&out.join("design.json"), &SimOutput { seed: cfg.seed, config_hash: hash, dataset_hash: data.hash(), design: &design })?;
    if args.grid {
        let cv = CvOptions { k: args.folds.unwrap_or(cfg.file.cv.folds), seed: cfg.seed, jobs: cfg.jobs };
        let spec = GridSpec { h: cfg.model.h, ..GridSpec::default() };
        let table = run_grid(&design, &spec, &cfg.chain, &cv, args.replications.unwrap_or(cfg.file.cv.replications))?;
        write_grid(out, &table)?;
    }
    Ok(())
}

fn write_grid(out: &Path, table: &crate::simstudy::GridTable) -> Result<()> {
    table.write_csv(&out.join("grid.csv"))?;
    fs::write(out.join("grid.txt"), table.render())?;
    #[derive(Serialize)]
    struct Envelope<'a> {
        seed: u64,
        config_hash: String,
        table: &'a crate::simstudy::GridTable,
    }
    let hash = config_hash(&(&table.design, &table.spec), &table.chain);
    write_json(&out.join("grid.json"), &Envelope { seed: table.design.seed, config_hash: hash, table })
}

/// Parse arguments, run the command and return the process exit code.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
