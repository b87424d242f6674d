//! Simulation designs and the model-comparison grid.
//!
//! Three generators: a logistic model with a subject-level error shared
//! across types, a stick-breaking model with a rank-1 coefficient array, and
//! one with a dense coefficient array. The grid scores every stick-breaking
//! structure in {none, rank 1, rank 2, full} x {no effects, rank 1, rank 2}
//! plus three logistic comparators by cross-validated LPPL.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{inv_logit, logistic_predictive_lppl, LogisticConfig, LogisticVariant};
use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::gibbs::ChainConfig;
use crate::model::{binomial_logpmf, compute_sticks, prior_generative_draw, CoefStructure, ErrorStructure, ModelConfig, ParamState};
use crate::predictive::{cross_validate, log_sum_exp, CvOptions};
use crate::sampling::{derive_seed, sample_binomial, RngHandle};

/// Coefficients of the logistic design.
pub const LOGISTIC_BETA: [f64; 6] = [0.0, 1.0, -1.0, 0.0, 1.0, -1.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimKind {
    Logistic,
    LowrankPsb,
    FullrankPsb,
}

impl std::str::FromStr for SimKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(SimKind::Logistic),
            "lowrank_psb" | "lowrank" => Ok(SimKind::LowrankPsb),
            "fullrank_psb" | "fullrank" => Ok(SimKind::FullrankPsb),
            _ => Err(Error::Parameter(format!("unknown simulation kind {s:?}"))),
        }
    }
}

impl std::fmt::Display for SimKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SimKind::Logistic => "logistic",
            SimKind::LowrankPsb => "lowrank_psb",
            SimKind::FullrankPsb => "fullrank_psb",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimDesign {
    pub kind: SimKind,
    pub n_subjects: usize,
    pub n_covariates: usize,
    /// Trials per type; its length fixes `J`.
    pub trials: Vec<u64>,
    /// Truncation of the generating stick-breaking process.
    pub h: usize,
    pub seed: u64,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self { kind: SimKind::LowrankPsb, n_subjects: 290, n_covariates: 6, trials: vec![48, 48, 48, 24], h: 25, seed: 1 }
    }
}

impl SimDesign {
    pub fn new(kind: SimKind, seed: u64) -> Self {
        Self { kind, seed, ..Self::default() }
    }

    /// Reduced scale used by the desk-top grids.
    pub fn desk(kind: SimKind, seed: u64) -> Self {
        Self { n_subjects: 150, ..Self::new(kind, seed) }
    }

    pub fn n_types(&self) -> usize {
        self.trials.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.trials.is_empty() || self.h == 0 {
            return Err(Error::Parameter("design dimensions must be positive".into()));
        }
        if self.kind == SimKind::Logistic && self.n_covariates != LOGISTIC_BETA.len() {
            return Err(Error::Parameter(format!(
                "logistic design needs {} covariates, got {}",
                LOGISTIC_BETA.len(),
                self.n_covariates
            )));
        }
        Ok(())
    }

    fn trial_matrix(&self) -> Vec<u64> {
        (0..self.n_subjects).flat_map(|_| self.trials.iter().copied()).collect()
    }
}

/// Parameters the data were generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    /// Latent success probabilities, `I x J` row-major.
    pub p: Vec<f64>,
    /// Logistic design: coefficients and subject errors.
    pub beta: Option<Vec<f64>>,
    pub eps: Option<Vec<f64>>,
    /// Stick-breaking designs: the generating state.
    pub state: Option<ParamState>,
}

/// First `ceil(D/2)` columns standard normal, the rest Bernoulli(0.5); every
/// column standardized (sample variance one). Constant columns are redrawn.
pub fn gen_covariates<R: Rng + ?Sized>(rng: &mut R, n_subjects: usize, d: usize) -> Result<DMatrix<f64>> {
    if n_subjects < 2 {
        return Err(Error::Parameter("need at least two subjects to standardize".into()));
    }
    let n_cont = d.div_ceil(2);
    let mut x = DMatrix::zeros(n_subjects, d);
    for k in 0..d {
        loop {
            for i in 0..n_subjects {
                x[(i, k)] = if k < n_cont {
                    rng.sample::<f64, _>(StandardNormal)
                } else if rng.random::<bool>() {
                    1.0
                } else {
                    0.0
                };
            }
            let first = x[(0, k)];
            if x.column(k).iter().any(|&v| v != first) {
                break;
            }
        }
    }
    Ok(Standardizer::fit(&x).transform(&x))
}

fn finish(design: &SimDesign, x: DMatrix<f64>, y: Vec<u64>) -> Result<Dataset> {
    let types: Vec<String> = (1..=design.n_types()).map(|j| format!("type{j}")).collect();
    Dataset::from_parts(None, Some(types), None, y, design.trial_matrix(), x)
}

/// `p_ij = inv_logit(X_i β + ε_i)`, equal across types, `ε_i ~ N(0, 1)`.
pub fn gen_logistic_sim<R: Rng + ?Sized>(rng: &mut R, design: &SimDesign) -> Result<(Dataset, SimTruth)> {
    design.validate()?;
    if design.kind != SimKind::Logistic {
        return Err(Error::Parameter(format!("design kind is {}", design.kind)));
    }
    let x = gen_covariates(rng, design.n_subjects, design.n_covariates)?;
    let eps: Vec<f64> = (0..design.n_subjects).map(|_| rng.sample(StandardNormal)).collect();
    let j = design.n_types();
    let mut p = Vec::with_capacity(design.n_subjects * j);
    let mut y = Vec::with_capacity(design.n_subjects * j);
    for i in 0..design.n_subjects {
        let lin: f64 = (0..design.n_covariates).map(|k| x[(i, k)] * LOGISTIC_BETA[k]).sum::<f64>() + eps[i];
        let pi = inv_logit(lin);
        for &n in &design.trials {
            p.push(pi);
            y.push(sample_binomial(rng, n, pi)?);
        }
    }
    let data = finish(design, x, y)?;
    Ok((data, SimTruth { p, beta: Some(LOGISTIC_BETA.to_vec()), eps: Some(eps), state: None }))
}

fn gen_psb<R: Rng + ?Sized>(rng: &mut R, design: &SimDesign, coef: CoefStructure) -> Result<(Dataset, SimTruth)> {
    design.validate()?;
    let x = gen_covariates(rng, design.n_subjects, design.n_covariates)?;
    let config = ModelConfig { h: design.h, coef, error: ErrorStructure::None, ..ModelConfig::default() };
    let (state, generated) = prior_generative_draw(rng, &config, &x, &design.trial_matrix(), design.n_types())?;
    let p = state.alloc.iter().map(|&c| state.theta[c]).collect();
    let data = finish(design, x, generated.y_all().to_vec())?;
    Ok((data, SimTruth { p, beta: None, eps: None, state: Some(state) }))
}

/// Probit stick-breaking data with a rank-1 coefficient array and no effects.
pub fn gen_lowrank_psb_sim<R: Rng + ?Sized>(rng: &mut R, design: &SimDesign) -> Result<(Dataset, SimTruth)> {
    gen_psb(rng, design, CoefStructure::LowRank(1))
}

/// Probit stick-breaking data with i.i.d. N(0, 1) coefficient entries.
pub fn gen_fullrank_psb_sim<R: Rng + ?Sized>(rng: &mut R, design: &SimDesign) -> Result<(Dataset, SimTruth)> {
    gen_psb(rng, design, CoefStructure::Full)
}

/// Dispatch on the design kind with the design's own seed.
pub fn generate(design: &SimDesign) -> Result<(Dataset, SimTruth)> {
    let mut rng = RngHandle::new(design.seed);
    match design.kind {
        SimKind::Logistic => gen_logistic_sim(&mut rng, design),
        SimKind::LowrankPsb => gen_lowrank_psb_sim(&mut rng, design),
        SimKind::FullrankPsb => gen_fullrank_psb_sim(&mut rng, design),
    }
}

/// Rows and columns of the comparison grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub coefs: Vec<CoefStructure>,
    pub errors: Vec<ErrorStructure>,
    pub logistic: Vec<LogisticVariant>,
    /// Truncation level of the fitted stick-breaking models.
    pub h: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            coefs: vec![CoefStructure::None, CoefStructure::LowRank(1), CoefStructure::LowRank(2), CoefStructure::Full],
            errors: vec![ErrorStructure::None, ErrorStructure::LowRank(1), ErrorStructure::LowRank(2)],
            logistic: vec![LogisticVariant::Separate, LogisticVariant::SharedBeta, LogisticVariant::SharedBetaEps],
            h: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CellModel {
    Psb { coef: CoefStructure, error: ErrorStructure },
    Logistic { variant: LogisticVariant },
}

impl CellModel {
    pub fn label(&self) -> String {
        match self {
            CellModel::Psb { coef, error } => format!("psb B={coef} E={error}"),
            CellModel::Logistic { variant } => format!("logistic {variant}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub model: CellModel,
    /// Mean LPPL over the successful replications.
    pub lppl: Option<f64>,
    pub replicates: Vec<Option<f64>>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridTable {
    pub design: SimDesign,
    pub spec: GridSpec,
    pub chain: ChainConfig,
    pub cv: CvOptions,
    pub cells: Vec<GridCell>,
}

impl GridTable {
    pub fn psb(&self, coef: CoefStructure, error: ErrorStructure) -> Option<f64> {
        self.find(CellModel::Psb { coef, error })
    }

    pub fn logistic(&self, variant: LogisticVariant) -> Option<f64> {
        self.find(CellModel::Logistic { variant })
    }

    fn find(&self, model: CellModel) -> Option<f64> {
        self.cells.iter().find(|c| c.model == model).and_then(|c| c.lppl)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["family", "coef", "error", "variant", "lppl", "status"])?;
        for c in &self.cells {
            let (family, coef, error, variant) = match c.model {
                CellModel::Psb { coef, error } => ("psb", coef.to_string(), error.to_string(), String::new()),
                CellModel::Logistic { variant } => ("logistic", String::new(), String::new(), variant.to_string()),
            };
            let lppl = c.lppl.map(|v| format!("{v:.3}")).unwrap_or_default();
            let status = if c.failures.is_empty() { "ok".to_string() } else { c.failures.join("; ") };
            w.write_record([family.to_string(), coef, error, variant, lppl, status])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned text: stick-breaking rows by coefficient structure, columns by
    /// effect structure, then one logistic row.
    pub fn render(&self) -> String {
        let fmt_v = |v: Option<f64>| v.map_or("failed".to_string(), |v| format!("{v:.1}"));
        let width = 17;
        let mut s = String::new();
        let _ = writeln!(s, "Mean LPPL, {} design (I = {}, seed {})", self.design.kind, self.design.n_subjects, self.design.seed);
        let _ = write!(s, "{:<16}", "stick-breaking");
        for e in &self.spec.errors {
            let label = match e {
                ErrorStructure::None => "no E".to_string(),
                ErrorStructure::LowRank(r) => format!("rank(E)={r}"),
            };
            let _ = write!(s, "{label:>width$}");
        }
        s.push('\n');
        for c in &self.spec.coefs {
            let label = match c {
                CoefStructure::None => "no B".to_string(),
                CoefStructure::SharedTypes => "shared B".to_string(),
                CoefStructure::Full => "full B".to_string(),
                CoefStructure::LowRank(r) => format!("rank(B)={r}"),
            };
            let _ = write!(s, "{label:<16}");
            for e in &self.spec.errors {
                let _ = write!(s, "{:>width$}", fmt_v(self.psb(*c, *e)));
            }
            s.push('\n');
        }
        if !self.spec.logistic.is_empty() {
            let _ = write!(s, "{:<16}", "logistic");
            for v in &self.spec.logistic {
                let _ = write!(s, "{:>width$}", v.to_string());
            }
            s.push('\n');
            let _ = write!(s, "{:<16}", "");
            for v in &self.spec.logistic {
                let _ = write!(s, "{:>width$}", fmt_v(self.logistic(*v)));
            }
            s.push('\n');
        }
        s
    }
}

/// Score one model on one dataset.
pub fn score_cell(model: CellModel, h: usize, data: &Dataset, chain: &ChainConfig, cv: &CvOptions) -> Result<f64> {
    let report = match model {
        CellModel::Psb { coef, error } => {
            let config = ModelConfig { h, coef, error, ..ModelConfig::default() };
            cross_validate(&config, chain, data, cv)?
        }
        CellModel::Logistic { variant } => logistic_predictive_lppl(&LogisticConfig::new(variant), chain, data, cv)?,
    };
    if !report.total_lppl.is_finite() {
        return Err(Error::NonFinite { step: "lppl", iteration: 0 });
    }
    Ok(report.total_lppl)
}

/// Cross-validated LPPL for every grid cell, averaged over `replications`
/// datasets. Cells run in parallel (`cv.jobs` workers); all cells share fold
/// assignments and seeds. A failing cell is recorded and the grid continues.
pub fn run_grid(
    design: &SimDesign,
    spec: &GridSpec,
    chain: &ChainConfig,
    cv: &CvOptions,
    replications: usize,
) -> Result<GridTable> {
    if replications == 0 {
        return Err(Error::Parameter("need at least one replication".into()));
    }
    let mut models: Vec<CellModel> = Vec::new();
    for &coef in &spec.coefs {
        for &error in &spec.errors {
            models.push(CellModel::Psb { coef, error });
        }
    }
    models.extend(spec.logistic.iter().map(|&variant| CellModel::Logistic { variant }));

    let datasets = (0..replications)
        .map(|r| {
            let d = SimDesign { seed: if r == 0 { design.seed } else { derive_seed(design.seed, r as u64) }, ..design.clone() };
            generate(&d).map(|(data, _)| data)
        })
        .collect::<Result<Vec<_>>>()?;
    let inner = CvOptions { jobs: 1, ..*cv };
    let jobs: Vec<(usize, usize)> = (0..models.len()).flat_map(|m| (0..replications).map(move |r| (m, r))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cv.jobs.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    let results: Vec<Result<f64>> =
        pool.install(|| jobs.par_iter().map(|&(m, r)| score_cell(models[m], spec.h, &datasets[r], chain, &inner)).collect());

    let mut cells: Vec<GridCell> =
        models.iter().map(|&model| GridCell { model, lppl: None, replicates: vec![None; replications], failures: vec![] }).collect();
    for (&(m, r), res) in jobs.iter().zip(results) {
        match res {
            Ok(v) => cells[m].replicates[r] = Some(v),
            Err(e) => cells[m].failures.push(format!("replicate {r}: {e}")),
        }
    }
    for c in &mut cells {
        let ok: Vec<f64> = c.replicates.iter().flatten().copied().collect();
        if !ok.is_empty() {
            c.lppl = Some(ok.iter().sum::<f64>() / ok.len() as f64);
        }
    }
    Ok(GridTable { design: design.clone(), spec: spec.clone(), chain: chain.clone(), cv: *cv, cells })
}

/// Oracle covariate signal of a stick-breaking design realization: the
/// in-sample log likelihood of the outcomes under the true weights minus
/// that under the subject-averaged (covariate-free) weights, both with the
/// true atoms. `None` for the logistic design.
pub fn covariate_signal(design: &SimDesign) -> Result<Option<f64>> {
    let (data, truth) = generate(design)?;
    let Some(state) = truth.state else { return Ok(None) };
    let sticks = compute_sticks(&state, data.x())?;
    let (n_sub, n_types, h_max) = (data.n_subjects(), data.n_types(), state.n_components());
    let mut mean_pi = vec![0.0; n_types * h_max];
    for i in 0..n_sub {
        for j in 0..n_types {
            for h in 0..h_max {
                mean_pi[j * h_max + h] += sticks.pi.get(i, j, h) / n_sub as f64;
            }
        }
    }
    let mut signal = 0.0;
    let (mut cond, mut marg) = (vec![0.0; h_max], vec![0.0; h_max]);
    for i in 0..n_sub {
        for j in 0..n_types {
            for h in 0..h_max {
                let lp = binomial_logpmf(data.y(i, j), data.n(i, j), state.theta[h])?;
                cond[h] = sticks.pi.get(i, j, h).ln() + lp;
                marg[h] = mean_pi[j * h_max + h].ln() + lp;
            }
            signal += log_sum_exp(&cond) - log_sum_exp(&marg);
        }
    }
    Ok(Some(signal))
}

/// The named desk-scale grids. Each fixes one design realization; the
/// command-line seed drives only chains and folds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridPreset {
    Table2Desk,
    Table3Desk,
    Table4Desk,
}

impl std::str::FromStr for GridPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table2-desk" => Ok(Self::Table2Desk),
            "table3-desk" => Ok(Self::Table3Desk),
            "table4-desk" => Ok(Self::Table4Desk),
            _ => Err(Error::input(format!("unknown preset {s:?}"))),
        }
    }
}

/// Seeds scanned when choosing the stick-breaking preset realizations.
pub const PRESET_SEED_SCAN: std::ops::RangeInclusive<u64> = 1..=60;

/// Target covariate signal per subject (nats) for the low-rank and
/// full-rank presets: best minus covariate-free full-scale LPPL over 290
/// subjects.
pub const PRESET_SIGNAL_PER_SUBJECT: [f64; 2] = [(3965.0 - 3277.0) / 290.0, (3961.0 - 3105.0) / 290.0];

impl GridPreset {
    pub fn kind(self) -> SimKind {
        match self {
            Self::Table2Desk => SimKind::Logistic,
            Self::Table3Desk => SimKind::LowrankPsb,
            Self::Table4Desk => SimKind::FullrankPsb,
        }
    }

    /// Realization seed. For the stick-breaking presets this is the seed in
    /// [`PRESET_SEED_SCAN`] whose [`covariate_signal`] at desk scale is
    /// closest to [`PRESET_SIGNAL_PER_SUBJECT`] times the subject count.
    pub fn design_seed(self) -> u64 {
        match self {
            Self::Table2Desk => 1,
            Self::Table3Desk => 7,
            Self::Table4Desk => 8,
        }
    }

    pub fn design(self) -> SimDesign {
        SimDesign::desk(self.kind(), self.design_seed())
    }
}

/// Chain and fold settings of the desk-scale grids.
pub fn desk_settings(seed: u64, jobs: usize) -> (ChainConfig, CvOptions) {
    (ChainConfig { iterations: 1500, burn_in: 750, thin: 1, seed, store_latents: false }, CvOptions { k: 5, seed, jobs })
}
