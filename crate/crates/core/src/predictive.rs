//! Posterior predictive simulation, held-out log predictive likelihood
//! (LPPL), K-fold cross-validation and predictive-quantile calibration.
//!
//! Cross-validation is generic over the fitted model through
//! [`PredictiveModel`], so the logistic comparators share the same scoring.

use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gibbs::{run_chain, ChainConfig};
use crate::model::{binomial_logpmf, log_stick_weights, Coefficients, ModelConfig, ParamState};
use crate::sampling::{derive_seed, sample_binomial, sample_categorical_log, RngHandle};
use crate::store::DrawStore;

const FOLD_STREAM: u64 = 0xF01D;
const FIT_STREAM: u64 = 0x1000;
const PREDICT_STREAM: u64 = 0x2000;

/// One joint predictive draw for a new subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveSample {
    pub p_tilde: Vec<f64>,
    pub y_tilde: Vec<u64>,
    pub draw_index: usize,
}

/// `x̃ B[:, j, h]` for every `(j, h)`, as a `J x H` matrix.
pub fn covariate_term(coef: &Coefficients, x: &[f64], n_types: usize, h_max: usize) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(n_types, h_max);
    let check = |d: usize| {
        if d != x.len() {
            Err(Error::Dimension(format!("profile has {} covariates, coefficients expect {d}", x.len())))
        } else {
            Ok(())
        }
    };
    match coef {
        Coefficients::None => {}
        Coefficients::Shared(b) => {
            check(b.nrows())?;
            for h in 0..h_max {
                let v: f64 = (0..x.len()).map(|d| x[d] * b[(d, h)]).sum();
                for j in 0..n_types {
                    out[(j, h)] = v;
                }
            }
        }
        Coefficients::Full(b) => {
            check(b.dims()[0])?;
            for (d, &xv) in x.iter().enumerate() {
                for j in 0..n_types {
                    for h in 0..h_max {
                        out[(j, h)] += xv * b.get(d, j, h);
                    }
                }
            }
        }
        Coefficients::LowRank(f) => {
            check(f.f1.nrows())?;
            for r in 0..f.rank() {
                let xb1: f64 = (0..x.len()).map(|d| x[d] * f.f1[(d, r)]).sum();
                for j in 0..n_types {
                    for h in 0..h_max {
                        out[(j, h)] += xb1 * f.f2[(j, r)] * f.f3[(h, r)];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Predictive success probabilities `p̃_j` for a new subject under one draw:
/// a fresh random-effect row, probit sticks, then a component per type.
/// `x` must be standardized with the training statistics.
pub fn predictive_probs<R: Rng + ?Sized>(rng: &mut R, state: &ParamState, x: &[f64]) -> Result<Vec<f64>> {
    let (n_types, h_max) = (state.n_types(), state.n_components());
    let mut eta = covariate_term(&state.coef, x, n_types, h_max)?;
    eta += &state.zjh;
    if let Some(f) = &state.effects {
        let e1: Vec<f64> = state.sigma2.iter().map(|s| s.sqrt() * rng.sample::<f64, _>(StandardNormal)).collect();
        for r in 0..f.rank() {
            for j in 0..n_types {
                for h in 0..h_max {
                    eta[(j, h)] += e1[r] * f.f2[(j, r)] * f.f3[(h, r)];
                }
            }
        }
    }
    let mut fibre = vec![0.0; h_max];
    let mut logw = vec![0.0; h_max];
    let mut p = Vec::with_capacity(n_types);
    for j in 0..n_types {
        for h in 0..h_max {
            fibre[h] = eta[(j, h)];
        }
        log_stick_weights(&fibre, &mut logw);
        p.push(state.theta[sample_categorical_log(rng, &logw)?]);
    }
    Ok(p)
}

/// Full predictive draw: probabilities and binomial counts for trials `n_tilde`.
pub fn predictive_draw<R: Rng + ?Sized>(
    rng: &mut R,
    state: &ParamState,
    draw_index: usize,
    x: &[f64],
    n_tilde: &[u64],
) -> Result<PredictiveSample> {
    if n_tilde.len() != state.n_types() {
        return Err(Error::Dimension(format!(
            "{} trial counts for {} types",
            n_tilde.len(),
            state.n_types()
        )));
    }
    let p_tilde = predictive_probs(rng, state, x)?;
    let y_tilde = draw_counts(rng, &p_tilde, n_tilde)?;
    Ok(PredictiveSample { p_tilde, y_tilde, draw_index })
}

fn draw_counts<R: Rng + ?Sized>(rng: &mut R, p: &[f64], n: &[u64]) -> Result<Vec<u64>> {
    p.iter().zip(n).map(|(&p, &n)| sample_binomial(rng, n, p)).collect()
}

/// log of the Monte Carlo average of `Π_j Binomial(Y_j; n_j, p̃_j)` over draws.
pub fn lppl_for_subject(p_draws: &[Vec<f64>], y: &[u64], n: &[u64]) -> Result<f64> {
    if p_draws.is_empty() {
        return Err(Error::Parameter("no predictive draws".into()));
    }
    let terms = p_draws
        .iter()
        .map(|p| {
            if p.len() != y.len() || y.len() != n.len() {
                return Err(Error::Dimension("predictive draw and outcomes disagree on J".into()));
            }
            let mut s = 0.0;
            for j in 0..y.len() {
                s += binomial_logpmf(y[j], n[j], p[j])?;
            }
            Ok(s)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(log_sum_exp(&terms) - (terms.len() as f64).ln())
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// A fitted model that can simulate predictive success probabilities for a
/// new subject given raw (unstandardized) covariates.
pub trait PredictiveModel: Send + Sync {
    /// One row of `J` probabilities per retained draw.
    fn predictive_probs(&self, rng: &mut RngHandle, x_raw: &[f64]) -> Result<Vec<Vec<f64>>>;
}

impl PredictiveModel for DrawStore {
    fn predictive_probs(&self, rng: &mut RngHandle, x_raw: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x_raw.len() != self.meta().n_covariates() {
            return Err(Error::Dimension(format!(
                "profile has {} covariates, fit used {}",
                x_raw.len(),
                self.meta().n_covariates()
            )));
        }
        let x = self.standardizer().transform_row(x_raw);
        self.draws().iter().map(|s| predictive_probs(rng, s, &x)).collect()
    }
}

/// Fold count, master seed and worker count for cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    pub seed: u64,
    /// Worker threads. Results do not depend on it, so it is not written out.
    #[serde(skip_serializing, default = "one_job")]
    pub jobs: usize,
}

fn one_job() -> usize {
    1
}

impl Default for CvOptions {
    fn default() -> Self {
        Self { k: 10, seed: 1, jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectScore {
    pub subject: String,
    pub fold: usize,
    pub lppl: f64,
}

/// Predictive quantiles of one held-out cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellQuantile {
    pub subject: String,
    #[serde(rename = "type")]
    pub type_name: String,
    pub y: u64,
    pub n: u64,
    /// Share of predictive draws strictly above the observation.
    pub phi: f64,
    /// `phi` plus a uniform share of the tied draws.
    pub phi_randomized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub total_lppl: f64,
    pub subjects: Vec<SubjectScore>,
    /// Cells with at least one trial.
    pub cells: Vec<CellQuantile>,
    pub ks_strict: f64,
    pub ks_randomized: f64,
}

impl CvReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn write_cells_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["subject", "type", "y", "n", "phi", "phi_randomized"])?;
        for c in &self.cells {
            w.write_record([
                c.subject.clone(),
                c.type_name.clone(),
                c.y.to_string(),
                c.n.to_string(),
                format!("{:?}", c.phi),
                format!("{:?}", c.phi_randomized),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn quantiles(&self, randomized: bool) -> Vec<f64> {
        self.cells.iter().map(|c| if randomized { c.phi_randomized } else { c.phi }).collect()
    }
}

/// Fold label per subject (canonical positions), from a seeded permutation.
pub fn assign_folds(n_subjects: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Parameter(format!("need at least 2 folds, got {k}")));
    }
    if k > n_subjects {
        return Err(Error::Parameter(format!("{k} folds for {n_subjects} subjects leaves a fold empty")));
    }
    let mut perm: Vec<usize> = (0..n_subjects).collect();
    perm.shuffle(&mut RngHandle::new(derive_seed(seed, FOLD_STREAM)));
    let mut fold = vec![0; n_subjects];
    for (pos, &i) in perm.iter().enumerate() {
        fold[i] = pos % k;
    }
    Ok(fold)
}

struct FoldResult {
    scores: Vec<(usize, f64)>,
    cells: Vec<(usize, usize, f64, f64)>,
}

/// K-fold cross-validation of any model. `fit` receives the training subset
/// and a per-fold seed. Subjects are put in identifier order first, so the
/// report does not depend on input order.
pub fn cross_validate_with<F>(data: &Dataset, opts: &CvOptions, fit: F) -> Result<CvReport>
where
    F: Fn(&Dataset, u64) -> Result<Box<dyn PredictiveModel>> + Sync,
{
    let data = data.subset(&data.canonical_order());
    let n_sub = data.n_subjects();
    let fold = assign_folds(n_sub, opts.k, opts.seed)?;
    let run_fold = |f: usize| -> Result<FoldResult> {
        let train: Vec<usize> = (0..n_sub).filter(|&i| fold[i] != f).collect();
        let test: Vec<usize> = (0..n_sub).filter(|&i| fold[i] == f).collect();
        let model = fit(&data.subset(&train), derive_seed(opts.seed, FIT_STREAM + f as u64))?;
        let mut rng = RngHandle::new(derive_seed(opts.seed, PREDICT_STREAM + f as u64));
        let n_types = data.n_types();
        let mut out = FoldResult { scores: Vec::new(), cells: Vec::new() };
        for &i in &test {
            let p = model.predictive_probs(&mut rng, &data.x_row(i))?;
            let y = &data.y_all()[i * n_types..(i + 1) * n_types];
            let n = &data.n_all()[i * n_types..(i + 1) * n_types];
            out.scores.push((i, lppl_for_subject(&p, y, n)?));
            let t = p.len() as f64;
            for j in 0..n_types {
                let (mut above, mut tied) = (0usize, 0usize);
                for pt in &p {
                    let yt = sample_binomial(&mut rng, n[j], pt[j])?;
                    if yt > y[j] {
                        above += 1;
                    } else if yt == y[j] {
                        tied += 1;
                    }
                }
                let u: f64 = rng.random();
                if n[j] > 0 {
                    out.cells.push((i, j, above as f64 / t, (above as f64 + u * tied as f64) / t));
                }
            }
        }
        Ok(out)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs.max(1))
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    let results: Vec<Result<FoldResult>> = pool.install(|| (0..opts.k).into_par_iter().map(run_fold).collect());

    let mut lppl = vec![f64::NAN; n_sub];
    let mut cells = Vec::new();
    for r in results {
        let r = r?;
        for (i, v) in r.scores {
            lppl[i] = v;
        }
        cells.extend(r.cells);
    }
    cells.sort_by_key(|c| (c.0, c.1));
    let subjects: Vec<SubjectScore> = (0..n_sub)
        .map(|i| SubjectScore { subject: data.subject_ids()[i].clone(), fold: fold[i], lppl: lppl[i] })
        .collect();
    let cells: Vec<CellQuantile> = cells
        .into_iter()
        .map(|(i, j, phi, phi_randomized)| CellQuantile {
            subject: data.subject_ids()[i].clone(),
            type_name: data.type_names()[j].clone(),
            y: data.y(i, j),
            n: data.n(i, j),
            phi,
            phi_randomized,
        })
        .collect();
    let total_lppl = subjects.iter().map(|s| s.lppl).sum();
    let strict: Vec<f64> = cells.iter().map(|c| c.phi).collect();
    let randomized: Vec<f64> = cells.iter().map(|c| c.phi_randomized).collect();
    let ks = |v: &[f64]| if v.is_empty() { 0.0 } else { quantile_ecdf(v).ks };
    Ok(CvReport {
        k: opts.k,
        seed: opts.seed,
        total_lppl,
        ks_strict: ks(&strict),
        ks_randomized: ks(&randomized),
        subjects,
        cells,
    })
}

/// K-fold cross-validation of the stick-breaking model.
pub fn cross_validate(model: &ModelConfig, chain: &ChainConfig, data: &Dataset, opts: &CvOptions) -> Result<CvReport> {
    cross_validate_with(data, opts, |train, seed| {
        let cfg = ChainConfig { seed, ..chain.clone() };
        Ok(Box::new(run_chain(&cfg, model, train)?) as Box<dyn PredictiveModel>)
    })
}

/// Empirical CDF of predictive quantiles and its KS distance from uniform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ecdf {
    /// Sorted quantiles; the ECDF jumps by `1/m` at each.
    pub sorted: Vec<f64>,
    pub ks: f64,
}

impl Ecdf {
    /// Share of quantiles strictly below `x`.
    pub fn below(&self, x: f64) -> f64 {
        self.sorted.partition_point(|&v| v < x) as f64 / self.sorted.len() as f64
    }
}

/// Panics on an empty input.
pub fn quantile_ecdf(phi: &[f64]) -> Ecdf {
    assert!(!phi.is_empty(), "empty quantile set");
    let mut sorted = phi.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len() as f64;
    let ks = sorted
        .iter()
        .enumerate()
        .map(|(k, &v)| ((k + 1) as f64 / m - v).max(v - k as f64 / m))
        .fold(0.0, f64::max);
    Ecdf { sorted, ks }
}

/// Predictive summary of one type for one covariate profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeSummary {
    #[serde(rename = "type")]
    pub type_name: String,
    pub trials: u64,
    /// Probability of each count `0..=trials`.
    pub histogram: Vec<f64>,
    pub p_quantiles: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSummary {
    pub profile: usize,
    pub covariates: Vec<f64>,
    pub draws: usize,
    pub types: Vec<TypeSummary>,
}

/// Linear-interpolation sample quantile of sorted data.
pub fn sample_quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Histograms of `Ỹ` and quantiles of `p̃` from predictive probabilities.
pub fn summarize_profile<R: Rng + ?Sized>(
    rng: &mut R,
    profile: usize,
    covariates: &[f64],
    p_draws: &[Vec<f64>],
    trials: &[u64],
    type_names: &[String],
) -> Result<ProfileSummary> {
    if p_draws.is_empty() {
        return Err(Error::Parameter("no predictive draws".into()));
    }
    if trials.len() != type_names.len() {
        return Err(Error::Dimension(format!("{} trial counts for {} types", trials.len(), type_names.len())));
    }
    let t = p_draws.len() as f64;
    let mut types = Vec::with_capacity(trials.len());
    for (j, &n) in trials.iter().enumerate() {
        let mut counts = vec![0usize; n as usize + 1];
        let mut ps = Vec::with_capacity(p_draws.len());
        for p in p_draws {
            counts[sample_binomial(rng, n, p[j])? as usize] += 1;
            ps.push(p[j]);
        }
        ps.sort_by(f64::total_cmp);
        types.push(TypeSummary {
            type_name: type_names[j].clone(),
            trials: n,
            histogram: counts.iter().map(|&c| c as f64 / t).collect(),
            p_quantiles: [sample_quantile(&ps, 0.025), sample_quantile(&ps, 0.5), sample_quantile(&ps, 0.975)],
        });
    }
    Ok(ProfileSummary { profile, covariates: covariates.to_vec(), draws: p_draws.len(), types })
}
