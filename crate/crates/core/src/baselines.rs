//! Bayesian logistic-regression comparators fitted by adaptive random-walk
//! Metropolis-within-Gibbs.
//!
//! `p_ij = inv_logit(x_i β_j + ε)` where, by variant,
//!
//! | variant           | β            | ε                  |
//! |-------------------|--------------|--------------------|
//! | `no_error`        | per type     | none               |
//! | `separate`        | per type     | per cell `ε_ij`    |
//! | `shared_beta`     | shared       | per cell `ε_ij`    |
//! | `shared_beta_eps` | shared       | per subject `ε_i`  |
//!
//! Coefficients have independent `N(0, prior_var_beta)` priors, `ε ~ N(0, σ²)`
//! and `σ² ~ IG(shape, rate)`. Covariates gain a leading intercept column
//! unless disabled.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::gibbs::ChainConfig;
use crate::predictive::{cross_validate_with, CvOptions, CvReport, PredictiveModel};
use crate::sampling::{sample_inverse_gamma, RngHandle};
use crate::store::{names1, names2, Block, StoreMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogisticVariant {
    NoError,
    Separate,
    SharedBeta,
    SharedBetaEps,
}

impl LogisticVariant {
    pub const ALL: [LogisticVariant; 4] =
        [LogisticVariant::NoError, LogisticVariant::Separate, LogisticVariant::SharedBeta, LogisticVariant::SharedBetaEps];

    pub fn shared_beta(self) -> bool {
        matches!(self, LogisticVariant::SharedBeta | LogisticVariant::SharedBetaEps)
    }

    pub fn has_error(self) -> bool {
        !matches!(self, LogisticVariant::NoError)
    }
}

impl fmt::Display for LogisticVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogisticVariant::NoError => "no_error",
            LogisticVariant::Separate => "separate",
            LogisticVariant::SharedBeta => "shared_beta",
            LogisticVariant::SharedBetaEps => "shared_beta_eps",
        })
    }
}

impl FromStr for LogisticVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LogisticVariant::ALL
            .into_iter()
            .find(|v| v.to_string() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown logistic variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub variant: LogisticVariant,
    pub prior_var_beta: f64,
    pub ig_hyper: (f64, f64),
    pub target_accept: f64,
    pub intercept: bool,
    /// Post-burn-in iterations without a single acceptance that count as divergence.
    pub divergence_window: usize,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            variant: LogisticVariant::NoError,
            prior_var_beta: 100.0,
            ig_hyper: (0.1, 0.1),
            target_accept: 0.44,
            intercept: true,
            divergence_window: 200,
        }
    }
}

impl LogisticConfig {
    pub fn new(variant: LogisticVariant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prior_var_beta > 0.0 && self.ig_hyper.0 > 0.0 && self.ig_hyper.1 > 0.0) {
            return Err(Error::Parameter("prior variances must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Parameter("target acceptance must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// log(p / (1 - p)).
pub fn logit(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("logit of {p}")));
    }
    Ok((p / (1.0 - p)).ln())
}

/// 1 / (1 + e^-x), kept strictly inside (0, 1).
pub fn inv_logit(x: f64) -> f64 {
    let p = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
    p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Binomial log-likelihood kernel on the logit scale.
#[inline]
fn cell_loglik(y: u64, n: u64, eta: f64) -> f64 {
    y as f64 * eta - n as f64 * softplus(eta)
}

/// Design with an optional leading intercept column.
fn design(x: &DMatrix<f64>, intercept: bool) -> DMatrix<f64> {
    if !intercept {
        return x.clone();
    }
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, k| if k == 0 { 1.0 } else { x[(i, k - 1)] })
}

/// Current parameters of a logistic chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticState {
    /// `J x P`, or `1 x P` with shared coefficients.
    pub beta: DMatrix<f64>,
    /// `I x J` per cell, `I x 1` per subject, `I x 0` without error.
    pub eps: DMatrix<f64>,
    pub sigma2: f64,
}

/// Random-walk Metropolis-within-Gibbs sampler with per-coordinate steps.
#[derive(Debug, Clone)]
pub struct LogisticSampler {
    config: LogisticConfig,
    x: DMatrix<f64>,
    y: Vec<u64>,
    n: Vec<u64>,
    n_types: usize,
    state: LogisticState,
    /// `I x J` linear predictor.
    eta: DMatrix<f64>,
    log_step_beta: DMatrix<f64>,
    log_step_eps: DMatrix<f64>,
    sweeps: usize,
    accepted: u64,
    proposed: u64,
}

impl LogisticSampler {
    /// `x` is used as given (already standardized, no intercept column).
    pub fn new(config: &LogisticConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let x = design(data.x(), config.intercept);
        let (n_sub, n_types, p) = (data.n_subjects(), data.n_types(), x.ncols());
        let beta_rows = if config.variant.shared_beta() { 1 } else { n_types };
        let eps_cols = match config.variant {
            LogisticVariant::NoError => 0,
            LogisticVariant::SharedBetaEps => 1,
            _ => n_types,
        };
        let state = LogisticState { beta: DMatrix::zeros(beta_rows, p), eps: DMatrix::zeros(n_sub, eps_cols), sigma2: 1.0 };
        let mut s = Self {
            config: config.clone(),
            x,
            y: data.y_all().to_vec(),
            n: data.n_all().to_vec(),
            n_types,
            state,
            eta: DMatrix::zeros(n_sub, n_types),
            log_step_beta: DMatrix::from_element(beta_rows, p, (0.5f64).ln()),
            log_step_eps: DMatrix::from_element(n_sub, eps_cols, (0.5f64).ln()),
            sweeps: 0,
            accepted: 0,
            proposed: 0,
        };
        s.recompute_eta();
        Ok(s)
    }

    pub fn state(&self) -> &LogisticState {
        &self.state
    }

    pub fn set_state(&mut self, state: LogisticState) {
        self.state = state;
        self.recompute_eta();
    }

    pub fn set_outcomes(&mut self, y: Vec<u64>) {
        self.y = y;
    }

    pub fn step_sizes(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.log_step_beta.map(f64::exp), self.log_step_eps.map(f64::exp))
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.x
    }

    fn eps_of(&self, i: usize, j: usize) -> f64 {
        match self.state.eps.ncols() {
            0 => 0.0,
            1 => self.state.eps[(i, 0)],
            _ => self.state.eps[(i, j)],
        }
    }

    fn recompute_eta(&mut self) {
        let (n_sub, p) = (self.x.nrows(), self.x.ncols());
        for i in 0..n_sub {
            for j in 0..self.n_types {
                let b = if self.state.beta.nrows() == 1 { 0 } else { j };
                let mut e = self.eps_of(i, j);
                for k in 0..p {
                    e += self.x[(i, k)] * self.state.beta[(b, k)];
                }
                self.eta[(i, j)] = e;
            }
        }
    }

    /// Log-likelihood of one cell with its predictor shifted by `delta`.
    #[inline]
    fn cell(&self, i: usize, j: usize, delta: f64) -> f64 {
        let k = i * self.n_types + j;
        cell_loglik(self.y[k], self.n[k], self.eta[(i, j)] + delta)
    }

    fn adapt(log_step: &mut f64, accept_prob: f64, target: f64, t: usize) {
        let gamma = (t as f64).powf(-0.6);
        *log_step += gamma * (accept_prob - target);
    }

    /// One sweep; step sizes adapt only when `adapt` is set. Returns the
    /// number of accepted proposals.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R, adapt: bool) -> Result<u64> {
        self.sweeps += 1;
        let t = self.sweeps;
        let target = self.config.target_accept;
        let (n_sub, p) = (self.x.nrows(), self.x.ncols());
        let mut accepted = 0u64;
        let prior_var = self.config.prior_var_beta;

        // Coefficients, one coordinate at a time.
        for b in 0..self.state.beta.nrows() {
            let types: Vec<usize> = if self.state.beta.nrows() == 1 { (0..self.n_types).collect() } else { vec![b] };
            for k in 0..p {
                let step = self.log_step_beta[(b, k)].exp();
                let old = self.state.beta[(b, k)];
                let new = old + step * rng.sample::<f64, _>(StandardNormal);
                let d = new - old;
                let mut log_ratio = (old * old - new * new) / (2.0 * prior_var);
                for i in 0..n_sub {
                    let dx = d * self.x[(i, k)];
                    for &j in &types {
                        log_ratio += self.cell(i, j, dx) - self.cell(i, j, 0.0);
                    }
                }
                let acc_prob = log_ratio.min(0.0).exp();
                let u: f64 = rng.random();
                if u < acc_prob {
                    self.state.beta[(b, k)] = new;
                    for i in 0..n_sub {
                        let dx = d * self.x[(i, k)];
                        for &j in &types {
                            self.eta[(i, j)] += dx;
                        }
                    }
                    accepted += 1;
                }
                self.proposed += 1;
                if adapt {
                    Self::adapt(&mut self.log_step_beta[(b, k)], acc_prob, target, t);
                }
            }
        }

        // Error terms.
        let cols = self.state.eps.ncols();
        let s2 = self.state.sigma2;
        for i in 0..n_sub {
            for c in 0..cols {
                let types: Vec<usize> = if cols == 1 { (0..self.n_types).collect() } else { vec![c] };
                let step = self.log_step_eps[(i, c)].exp();
                let old = self.state.eps[(i, c)];
                let new = old + step * rng.sample::<f64, _>(StandardNormal);
                let d = new - old;
                let mut log_ratio = (old * old - new * new) / (2.0 * s2);
                for &j in &types {
                    log_ratio += self.cell(i, j, d) - self.cell(i, j, 0.0);
                }
                let acc_prob = log_ratio.min(0.0).exp();
                let u: f64 = rng.random();
                if u < acc_prob {
                    self.state.eps[(i, c)] = new;
                    for &j in &types {
                        self.eta[(i, j)] += d;
                    }
                    accepted += 1;
                }
                self.proposed += 1;
                if adapt {
                    Self::adapt(&mut self.log_step_eps[(i, c)], acc_prob, target, t);
                }
            }
        }

        if self.config.variant.has_error() {
            let m = self.state.eps.len() as f64;
            let ss: f64 = self.state.eps.iter().map(|e| e * e).sum();
            let (a, b) = self.config.ig_hyper;
            self.state.sigma2 = sample_inverse_gamma(rng, a + 0.5 * m, b + 0.5 * ss)?;
        }
        if !self.eta.iter().all(|v| v.is_finite()) || !self.state.sigma2.is_finite() {
            return Err(Error::NonFinite { step: "logistic", iteration: t });
        }
        self.accepted += accepted;
        Ok(accepted)
    }

    /// Data log-likelihood at the current state (binomial kernel only).
    pub fn loglik(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.x.nrows() {
            for j in 0..self.n_types {
                s += self.cell(i, j, 0.0);
            }
        }
        s
    }

    /// Success probabilities of every cell at the current state.
    pub fn probabilities(&self) -> Vec<f64> {
        self.eta.transpose().iter().map(|&e| inv_logit(e)).collect()
    }
}

/// Retained draws of a logistic chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticDraws {
    pub config: LogisticConfig,
    pub meta: StoreMeta,
    pub n_types: usize,
    pub beta: Vec<DMatrix<f64>>,
    pub eps: Vec<DMatrix<f64>>,
    pub sigma2: Vec<f64>,
    pub acceptance_rate: f64,
    /// Final per-coordinate step sizes for β.
    pub step_beta: DMatrix<f64>,
}

/// Fit one logistic chain; covariates are standardized with the training
/// statistics first.
pub fn fit_logistic<R: Rng + ?Sized>(
    rng: &mut R,
    config: &LogisticConfig,
    data: &Dataset,
    chain: &ChainConfig,
) -> Result<LogisticDraws> {
    chain.validate()?;
    let standardizer = Standardizer::fit(data.x());
    let train = data.with_covariates(standardizer.transform(data.x()))?;
    let mut sampler = LogisticSampler::new(config, &train)?;
    let mut out = LogisticDraws {
        config: config.clone(),
        meta: StoreMeta::new("logistic", config, chain, data, &standardizer),
        n_types: data.n_types(),
        beta: Vec::new(),
        eps: Vec::new(),
        sigma2: Vec::new(),
        acceptance_rate: 0.0,
        step_beta: DMatrix::zeros(0, 0),
    };
    let mut idle = 0usize;
    for t in 1..=chain.iterations {
        let acc = sampler.sweep(rng, t <= chain.burn_in)?;
        if t > chain.burn_in {
            idle = if acc == 0 { idle + 1 } else { 0 };
            if idle >= config.divergence_window {
                return Err(Error::Diverged(format!(
                    "{} variant accepted nothing for {idle} iterations (last at {})",
                    config.variant,
                    t - idle
                )));
            }
        }
        if chain.keeps(t) {
            out.beta.push(sampler.state.beta.clone());
            out.eps.push(sampler.state.eps.clone());
            out.sigma2.push(sampler.state.sigma2);
        }
    }
    out.meta.draws = out.beta.len();
    out.acceptance_rate = sampler.acceptance_rate();
    out.step_beta = sampler.step_sizes().0;
    Ok(out)
}

impl LogisticDraws {
    /// Predictive probabilities for a new subject under draw `t`, with a
    /// fresh error term from `N(0, σ²)`.
    pub fn predictive_probs_at<R: Rng + ?Sized>(&self, rng: &mut R, t: usize, x_std: &[f64]) -> Vec<f64> {
        let beta = &self.beta[t];
        let mut row = Vec::with_capacity(x_std.len() + 1);
        if self.config.intercept {
            row.push(1.0);
        }
        row.extend_from_slice(x_std);
        let sd = self.sigma2[t].sqrt();
        let shared_eps = match self.config.variant {
            LogisticVariant::SharedBetaEps => sd * rng.sample::<f64, _>(StandardNormal),
            _ => 0.0,
        };
        (0..self.n_types)
            .map(|j| {
                let b = if beta.nrows() == 1 { 0 } else { j };
                let mut e: f64 = row.iter().enumerate().map(|(k, v)| v * beta[(b, k)]).sum();
                e += match self.config.variant {
                    LogisticVariant::NoError => 0.0,
                    LogisticVariant::SharedBetaEps => shared_eps,
                    _ => sd * rng.sample::<f64, _>(StandardNormal),
                };
                inv_logit(e)
            })
            .collect()
    }

    /// Write the draws in the shared store layout (`family = "logistic"`).
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.meta.write(dir)?;
        let (rows, p) = self.beta.first().map_or((0, 0), |b| (b.nrows(), b.ncols()));
        let mut beta = Block::new(names2("beta", rows, p));
        beta.rows = self.beta.iter().map(crate::store::flat).collect();
        beta.write(&dir.join("beta.csv"))?;
        if self.config.variant.has_error() {
            let (r, c) = self.eps.first().map_or((0, 0), |e| (e.nrows(), e.ncols()));
            let mut eps = Block::new(names2("eps", r, c));
            eps.rows = self.eps.iter().map(crate::store::flat).collect();
            eps.write(&dir.join("eps.csv"))?;
            let mut s2 = Block::new(names1("sigma2", 1));
            s2.rows = self.sigma2.iter().map(|&v| vec![v]).collect();
            s2.write(&dir.join("sigma2.csv"))?;
        }
        Ok(())
    }
}

impl PredictiveModel for LogisticDraws {
    fn predictive_probs(&self, rng: &mut RngHandle, x_raw: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x_raw.len() != self.meta.n_covariates() {
            return Err(Error::Dimension(format!(
                "profile has {} covariates, fit used {}",
                x_raw.len(),
                self.meta.n_covariates()
            )));
        }
        let x = self.meta.standardizer.transform_row(x_raw);
        Ok((0..self.beta.len()).map(|t| self.predictive_probs_at(rng, t, &x)).collect())
    }
}

/// Cross-validated LPPL of a logistic comparator through the shared machinery.
pub fn logistic_predictive_lppl(
    config: &LogisticConfig,
    chain: &ChainConfig,
    data: &Dataset,
    opts: &CvOptions,
) -> Result<CvReport> {
    cross_validate_with(data, opts, |train, seed| {
        let cfg = ChainConfig { seed, ..chain.clone() };
        let mut rng = RngHandle::new(seed);
        Ok(Box::new(fit_logistic(&mut rng, config, train, &cfg)?) as Box<dyn PredictiveModel>)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictive::lppl_for_subject;
    use crate::sampling::sample_binomial;

    fn toy(n_sub: usize, n_types: usize, trials: u64, seed: u64) -> Dataset {
        let mut rng = RngHandle::new(seed);
        let x = DMatrix::from_fn(n_sub, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = vec![trials; n_sub * n_types];
        let y = n.iter().map(|&n| rng.random_range(0..=n)).collect();
        Dataset::from_parts(None, None, None, y, n, x).unwrap()
    }

    #[test]
    fn logit_cases() {
        assert_eq!(logit(0.5).unwrap(), 0.0);
        assert!((inv_logit(logit(0.9).unwrap()) - 0.9).abs() < 1e-12);
        assert!(inv_logit(-745.0) > 0.0);
        assert!(inv_logit(700.0) < 1.0);
        assert!(inv_logit(-700.0) > 0.0);
        assert!(logit(0.0).is_err() && logit(1.0).is_err());
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(cell_loglik(3, 5, -800.0).is_finite());
        for v in LogisticVariant::ALL {
            assert_eq!(v.to_string().parse::<LogisticVariant>().unwrap(), v);
        }
    }

    #[test]
    fn null_data_recovers_prior() {
        let data = Dataset::from_parts(None, None, None, vec![0; 40], vec![0; 40], DMatrix::from_fn(20, 1, |i, _| i as f64))
            .unwrap();
        let chain = ChainConfig::new(30_000, 2000, 0);
        let mut rng = RngHandle::new(1);
        let draws = fit_logistic(&mut rng, &LogisticConfig::default(), &data, &chain).unwrap();
        // Four independent coordinates (2 types x intercept + slope).
        let vals: Vec<f64> = draws.beta.iter().flat_map(|b| b.iter().copied().collect::<Vec<_>>()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!((var / 100.0 - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn large_n_recovers_slope() {
        let mut rng = RngHandle::new(2);
        let n_sub = 300;
        let x = DMatrix::from_fn(n_sub, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
        let st = Standardizer::fit(&x);
        let xs = st.transform(&x);
        let n = vec![50u64; n_sub];
        let y: Vec<u64> = (0..n_sub).map(|i| sample_binomial(&mut rng, 50, inv_logit(xs[(i, 0)])).unwrap()).collect();
        let data = Dataset::from_parts(None, None, None, y, n, x).unwrap();
        let draws = fit_logistic(&mut rng, &LogisticConfig::default(), &data, &ChainConfig::new(3000, 1000, 0)).unwrap();
        let slope: Vec<f64> = draws.beta.iter().map(|b| b[(0, 1)]).collect();
        let m = slope.iter().sum::<f64>() / slope.len() as f64;
        let sd = (slope.iter().map(|v| (v - m).powi(2)).sum::<f64>() / slope.len() as f64).sqrt();
        assert!((m - 1.0).abs() < 3.0 * sd, "{m} ± {sd}");
        assert!(draws.acceptance_rate > 0.2 && draws.acceptance_rate < 0.7);
    }

    #[test]
    fn adaptation_freezes_after_burn_in() {
        let data = toy(10, 2, 5, 3);
        let config = LogisticConfig::new(LogisticVariant::Separate);
        let mut s = LogisticSampler::new(&config, &data).unwrap();
        let mut rng = RngHandle::new(4);
        for _ in 0..50 {
            s.sweep(&mut rng, true).unwrap();
        }
        let frozen = s.step_sizes();
        assert_ne!(frozen.0, DMatrix::from_element(2, 2, 0.5));
        for _ in 0..50 {
            s.sweep(&mut rng, false).unwrap();
        }
        assert_eq!(s.step_sizes(), frozen);

        // fit_logistic reports the steps reached at the end of burn-in.
        let chain = ChainConfig::new(80, 30, 9);
        let a = fit_logistic(&mut RngHandle::new(9), &config, &data, &chain).unwrap();
        let long = ChainConfig::new(200, 30, 9);
        let b = fit_logistic(&mut RngHandle::new(9), &config, &data, &long).unwrap();
        assert_eq!(a.step_beta, b.step_beta);
    }

    #[test]
    fn shared_eps_with_one_type_matches_separate() {
        let data = toy(12, 1, 8, 5);
        let chain = ChainConfig::new(60, 20, 0);
        let a = fit_logistic(&mut RngHandle::new(6), &LogisticConfig::new(LogisticVariant::Separate), &data, &chain).unwrap();
        let b = fit_logistic(&mut RngHandle::new(6), &LogisticConfig::new(LogisticVariant::SharedBetaEps), &data, &chain)
            .unwrap();
        assert_eq!(a.beta, b.beta);
        assert_eq!(a.eps, b.eps);
        assert_eq!(a.sigma2, b.sigma2);
    }

    #[test]
    fn sigma2_positive_and_eps_shapes() {
        let data = toy(7, 3, 4, 7);
        for v in LogisticVariant::ALL {
            let d = fit_logistic(&mut RngHandle::new(8), &LogisticConfig::new(v), &data, &ChainConfig::new(20, 10, 0)).unwrap();
            assert_eq!(d.beta.len(), 10);
            assert!(d.sigma2.iter().all(|&s| s > 0.0));
            let cols = match v {
                LogisticVariant::NoError => 0,
                LogisticVariant::SharedBetaEps => 1,
                _ => 3,
            };
            assert_eq!(d.eps[0].ncols(), cols);
            assert_eq!(d.beta[0].nrows(), if v.shared_beta() { 1 } else { 3 });
        }
    }

    #[test]
    fn zero_coefficients_give_closed_form_lppl() {
        let data = toy(3, 2, 6, 9);
        let mut draws = fit_logistic(&mut RngHandle::new(1), &LogisticConfig::default(), &data, &ChainConfig::new(4, 2, 0)).unwrap();
        for b in draws.beta.iter_mut() {
            b.fill(0.0);
        }
        let mut rng = RngHandle::new(2);
        let p = draws.predictive_probs(&mut rng, &[0.3]).unwrap();
        assert!(p.iter().flatten().all(|&v| v == 0.5));
        let (y, n) = ([2u64, 5], [6u64, 6]);
        let choose = |n: u64, k: u64| (0..k).fold(1.0f64, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
        let closed = (choose(6, 2) * 0.5f64.powi(6)).ln() + (choose(6, 5) * 0.5f64.powi(6)).ln();
        assert!((lppl_for_subject(&p, &y, &n).unwrap() - closed).abs() < 1e-12);
    }

    #[test]
    fn single_draw_lppl_is_plug_in_loglik() {
        let data = toy(4, 2, 6, 10);
        let draws = fit_logistic(&mut RngHandle::new(3), &LogisticConfig::default(), &data, &ChainConfig::new(3, 2, 0)).unwrap();
        assert_eq!(draws.beta.len(), 1);
        let x = [0.4];
        let p = draws.predictive_probs(&mut RngHandle::new(4), &x).unwrap();
        let xs = draws.meta.standardizer.transform_row(&x);
        let plug: Vec<f64> = (0..2).map(|j| inv_logit(draws.beta[0][(j, 0)] + xs[0] * draws.beta[0][(j, 1)])).collect();
        assert_eq!(p[0], plug);
    }

    #[test]
    fn cv_runs_for_every_variant() {
        let data = toy(9, 2, 6, 11);
        for v in LogisticVariant::ALL {
            let rep = logistic_predictive_lppl(
                &LogisticConfig::new(v),
                &ChainConfig::new(40, 20, 0),
                &data,
                &CvOptions { k: 3, seed: 1, jobs: 1 },
            )
            .unwrap();
            assert!(rep.total_lppl.is_finite());
        }
    }

    #[test]
    fn saves_store_layout() {
        let data = toy(4, 2, 6, 12);
        let d = fit_logistic(&mut RngHandle::new(5), &LogisticConfig::new(LogisticVariant::Separate), &data, &ChainConfig::new(6, 2, 0))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let meta = StoreMeta::read(dir.path()).unwrap();
        assert_eq!(meta.family, "logistic");
        assert_eq!(Block::read(&dir.path().join("beta.csv")).unwrap().rows.len(), 4);
        assert!(dir.path().join("sigma2.csv").exists());
    }
}
