//! Model configuration, parameter state, probit stick-breaking weights,
//! the binomial likelihood and the prior-generative draw.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use libm::lgamma as ln_gamma;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::sampling::{
    sample_beta, sample_binomial, sample_categorical_log, sample_inverse_gamma, sample_normal,
    std_normal_cdf, std_normal_log_cdf,
};
use crate::tensor::{contract_mode1, cp_compose, Array3, CpFactors};

/// How covariates enter the stick-breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CoefStructure {
    None,
    /// One `D x H` matrix shared by every type.
    SharedTypes,
    /// Independent `D x J x H` coefficients.
    Full,
    /// CP rank-`R` coefficient array.
    LowRank(usize),
}

/// Subject-level random effects on the stick-breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ErrorStructure {
    None,
    LowRank(usize),
}

fn parse_rank(s: &str) -> Option<usize> {
    let s = s.trim();
    let digits = s
        .strip_prefix("low_rank(")
        .and_then(|r| r.strip_suffix(')'))
        .or_else(|| s.strip_prefix("low_rank:"))
        .or_else(|| s.strip_prefix("rank"))?;
    digits.trim().parse().ok().filter(|&r: &usize| r >= 1)
}

impl FromStr for CoefStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Self::None),
            "shared_types" | "shared" => Ok(Self::SharedTypes),
            "full" => Ok(Self::Full),
            other => parse_rank(other)
                .map(Self::LowRank)
                .ok_or_else(|| Error::input(format!("unknown coefficient structure `{other}`"))),
        }
    }
}

impl FromStr for ErrorStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Self::None),
            other => parse_rank(other)
                .map(Self::LowRank)
                .ok_or_else(|| Error::input(format!("unknown error structure `{other}`"))),
        }
    }
}

impl fmt::Display for CoefStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::SharedTypes => f.write_str("shared_types"),
            Self::Full => f.write_str("full"),
            Self::LowRank(r) => write!(f, "low_rank({r})"),
        }
    }
}

impl fmt::Display for ErrorStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::LowRank(r) => write!(f, "low_rank({r})"),
        }
    }
}

macro_rules! string_serde {
    ($t:ty) => {
        impl TryFrom<String> for $t {
            type Error = Error;
            fn try_from(s: String) -> Result<Self> {
                s.parse()
            }
        }
        impl From<$t> for String {
            fn from(v: $t) -> String {
                v.to_string()
            }
        }
    };
}
string_serde!(CoefStructure);
string_serde!(ErrorStructure);

/// Structural choices and prior hyperparameters of a stick-breaking model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Truncation level.
    pub h: usize,
    pub coef: CoefStructure,
    pub error: ErrorStructure,
    /// Beta(a, b) base distribution of the atoms.
    pub beta_base: (f64, f64),
    /// Inverse-gamma (shape, rate) prior on the effect scales.
    pub ig_hyper: (f64, f64),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            h: 25,
            coef: CoefStructure::LowRank(1),
            error: ErrorStructure::LowRank(1),
            beta_base: (1.0, 1.0),
            ig_hyper: (0.1, 0.1),
        }
    }
}

impl ModelConfig {
    pub fn new(h: usize, coef: CoefStructure, error: ErrorStructure) -> Self {
        Self { h, coef, error, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.h < 2 {
            return Err(Error::Parameter(format!("truncation level {} < 2", self.h)));
        }
        let (a, b) = self.beta_base;
        if !(a > 0.0 && b > 0.0) {
            return Err(Error::Parameter(format!("Beta base ({a}, {b}) must be positive")));
        }
        let (s, r) = self.ig_hyper;
        if !(s > 0.0 && r > 0.0) {
            return Err(Error::Parameter(format!("inverse-gamma prior ({s}, {r}) must be positive")));
        }
        Ok(())
    }

    pub fn effect_rank(&self) -> usize {
        match self.error {
            ErrorStructure::None => 0,
            ErrorStructure::LowRank(r) => r,
        }
    }

    /// Short label used in tables, e.g. `B=rank1,E=none`.
    pub fn label(&self) -> String {
        let b = match self.coef {
            CoefStructure::None => "none".to_string(),
            CoefStructure::SharedTypes => "shared".to_string(),
            CoefStructure::Full => "full".to_string(),
            CoefStructure::LowRank(r) => format!("rank{r}"),
        };
        let e = match self.error {
            ErrorStructure::None => "none".to_string(),
            ErrorStructure::LowRank(r) => format!("rank{r}"),
        };
        format!("B={b},E={e}")
    }
}

/// Coefficient parameters in whichever form the configuration asks for.
#[derive(Debug, Clone, PartialEq)]
pub enum Coefficients {
    None,
    Shared(DMatrix<f64>),
    Full(Array3),
    LowRank(CpFactors),
}

impl Coefficients {
    /// Dense `D x J x H` array, or `None` when covariates do not enter.
    pub fn dense(&self, n_types: usize) -> Option<Array3> {
        match self {
            Coefficients::None => None,
            Coefficients::Shared(m) => {
                Some(Array3::from_fn([m.nrows(), n_types, m.ncols()], |d, _, h| m[(d, h)]))
            }
            Coefficients::Full(a) => Some(a.clone()),
            Coefficients::LowRank(f) => Some(cp_compose(f)),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Coefficients::None => true,
            Coefficients::Shared(m) => m.iter().all(|v| v.is_finite()),
            Coefficients::Full(a) => a.is_finite(),
            Coefficients::LowRank(f) => f.is_finite(),
        }
    }
}

/// One complete sampler state.
///
/// Allocations are zero-based and stored row-major over `(i, j)`. `zstar`
/// holds the latent probit variables; entries with `h > C_ij` (and every
/// entry at `h = H - 1`) are placeholders that are never read. Retained draws
/// may carry an empty `zstar`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub theta: Vec<f64>,
    /// `J x H` intercepts.
    pub zjh: DMatrix<f64>,
    pub alpha: f64,
    pub coef: Coefficients,
    /// CP factors of the `I x J x H` random-effect array.
    pub effects: Option<CpFactors>,
    pub sigma2: Vec<f64>,
    pub alloc: Vec<usize>,
    pub zstar: Array3,
}

impl ParamState {
    pub fn n_components(&self) -> usize {
        self.theta.len()
    }

    pub fn n_types(&self) -> usize {
        self.zjh.nrows()
    }

    /// Copy without the latent probit variables.
    pub fn without_latents(&self) -> ParamState {
        ParamState { zstar: Array3::zeros(0, 0, 0), ..self.clone() }
    }

    /// Check the invariants that hold after every full sweep.
    pub fn check_invariants(&self) -> Result<()> {
        if let Some(h) = self.theta.iter().position(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::Invariant(format!("theta[{h}] = {} outside (0, 1)", self.theta[h])));
        }
        if let Some(r) = self.sigma2.iter().position(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Invariant(format!("sigma2[{r}] = {} not positive", self.sigma2[r])));
        }
        let h_max = self.n_components();
        if self.alloc.iter().any(|&c| c >= h_max) {
            return Err(Error::Invariant("allocation outside 0..H".into()));
        }
        let [n1, n2, n3] = self.zstar.dims();
        if n1 * n2 * n3 > 0 {
            for i in 0..n1 {
                for j in 0..n2 {
                    let c = self.alloc[i * n2 + j];
                    let fib = self.zstar.fiber(i, j);
                    if fib[..c].iter().any(|&z| !(z < 0.0)) {
                        return Err(Error::Invariant(format!("latent sign pattern broken at ({i}, {j})")));
                    }
                    if c + 1 < n3 && !(fib[c] > 0.0) {
                        return Err(Error::Invariant(format!("latent at allocation not positive at ({i}, {j})")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Probit stick-breaks and the resulting weights for every `(i, j, h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StickWeights {
    /// Linear predictor `Z_jh + X[i,:] B[:,j,h] + E_ijh`.
    pub eta: Array3,
    pub v: Array3,
    pub pi: Array3,
}

impl StickWeights {
    /// log π for one cell, from the linear predictor so deep tails stay finite.
    pub fn log_pi(&self, i: usize, j: usize, out: &mut [f64]) {
        log_stick_weights(self.eta.fiber(i, j), out);
    }
}

/// log π_h = log Φ(η_h) + Σ_{l<h} log Φ(-η_l), with the last break forced to one.
pub fn log_stick_weights(eta: &[f64], out: &mut [f64]) {
    let h_max = eta.len();
    let mut acc = 0.0;
    for h in 0..h_max {
        if h + 1 == h_max {
            out[h] = acc;
        } else {
            out[h] = acc + std_normal_log_cdf(eta[h]);
            acc += std_normal_log_cdf(-eta[h]);
        }
    }
}

/// π_h = V_h Π_{l<h} (1 - V_l) for one fibre of breaks (last break forced to one).
pub fn stick_weights_from_breaks(v: &mut [f64], pi: &mut [f64]) {
    let h_max = v.len();
    if h_max == 0 {
        return;
    }
    v[h_max - 1] = 1.0;
    let mut remaining = 1.0;
    for h in 0..h_max {
        pi[h] = v[h] * remaining;
        remaining *= 1.0 - v[h];
    }
}

/// Linear predictor array for all subjects.
pub fn linear_predictor(state: &ParamState, x: &DMatrix<f64>) -> Result<Array3> {
    let n_sub = x.nrows();
    let n_types = state.n_types();
    let h_max = state.n_components();
    let xb = match state.coef.dense(n_types) {
        Some(b) => Some(contract_mode1(x, &b)?),
        None => None,
    };
    let e = state.effects.as_ref().map(cp_compose);
    if let Some(e) = &e {
        if e.dims() != [n_sub, n_types, h_max] {
            return Err(Error::Dimension(format!(
                "random effects are {:?}, expected {:?}",
                e.dims(),
                [n_sub, n_types, h_max]
            )));
        }
    }
    let mut eta = Array3::from_fn([n_sub, n_types, h_max], |_, j, h| state.zjh[(j, h)]);
    for i in 0..n_sub {
        for j in 0..n_types {
            let fib = eta.fiber_mut(i, j);
            if let Some(xb) = &xb {
                for (v, b) in fib.iter_mut().zip(xb.fiber(i, j)) {
                    *v += b;
                }
            }
            if let Some(e) = &e {
                for (v, b) in fib.iter_mut().zip(e.fiber(i, j)) {
                    *v += b;
                }
            }
        }
    }
    Ok(eta)
}

/// Stick-breaks and weights implied by `state` for covariates `x`.
pub fn compute_sticks(state: &ParamState, x: &DMatrix<f64>) -> Result<StickWeights> {
    let eta = linear_predictor(state, x)?;
    if !eta.is_finite() {
        return Err(Error::Domain("non-finite stick-breaking linear predictor".into()));
    }
    let [n1, n2, n3] = eta.dims();
    let mut v = Array3::from_fn([n1, n2, n3], |i, j, h| std_normal_cdf(eta.get(i, j, h)));
    let mut pi = Array3::zeros(n1, n2, n3);
    for i in 0..n1 {
        for j in 0..n2 {
            let vf = v.fiber_mut(i, j);
            let mut buf = vec![0.0; n3];
            stick_weights_from_breaks(vf, &mut buf);
            pi.fiber_mut(i, j).copy_from_slice(&buf);
        }
    }
    Ok(StickWeights { eta, v, pi })
}

/// log C(n, y) via log-gamma.
pub fn log_binomial_coefficient(y: u64, n: u64) -> f64 {
    if y == 0 || y == n {
        return 0.0;
    }
    ln_gamma(n as f64 + 1.0) - ln_gamma(y as f64 + 1.0) - ln_gamma((n - y) as f64 + 1.0)
}

/// log of the binomial pmf, exact at p ∈ {0, 1}.
pub fn binomial_logpmf(y: u64, n: u64, p: f64) -> Result<f64> {
    if y > n {
        return Err(Error::Domain(format!("binomial count {y} exceeds trials {n}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("binomial probability {p}")));
    }
    Ok(log_binomial_coefficient(y, n) + binomial_kernel(y, n, p))
}

/// `y log p + (n - y) log(1 - p)` with 0·log 0 = 0.
#[inline]
pub fn binomial_kernel(y: u64, n: u64, p: f64) -> f64 {
    let fails = n - y;
    let a = if y == 0 { 0.0 } else { y as f64 * p.ln() };
    let b = if fails == 0 { 0.0 } else { fails as f64 * (1.0 - p).ln() };
    a + b
}

/// Σ_ij log Binomial(Y_ij; n_ij, θ_{C_ij}).
pub fn loglik(state: &ParamState, data: &Dataset) -> Result<f64> {
    let n_types = data.n_types();
    let mut total = 0.0;
    for i in 0..data.n_subjects() {
        for j in 0..n_types {
            let c = state.alloc[i * n_types + j];
            total += binomial_logpmf(data.y(i, j), data.n(i, j), state.theta[c])?;
        }
    }
    Ok(total)
}

fn std_normal_matrix<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize, sd: f64) -> DMatrix<f64> {
    // Row-major fill keeps the draw order independent of storage layout.
    let mut m = DMatrix::zeros(r, c);
    for i in 0..r {
        for k in 0..c {
            m[(i, k)] = sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    m
}

/// Draw every parameter from its prior, top-down. Latents are left empty.
pub fn draw_prior_state<R: Rng + ?Sized>(
    rng: &mut R,
    config: &ModelConfig,
    n_subjects: usize,
    n_types: usize,
    n_covariates: usize,
) -> Result<ParamState> {
    let h_max = config.h;
    let alpha = sample_normal(rng, 0.0, 1.0)?;
    let mut zjh = DMatrix::zeros(n_types, h_max);
    for j in 0..n_types {
        for h in 0..h_max {
            zjh[(j, h)] = sample_normal(rng, alpha, 1.0)?;
        }
    }
    let coef = match config.coef {
        CoefStructure::None => Coefficients::None,
        CoefStructure::SharedTypes => Coefficients::Shared(std_normal_matrix(rng, n_covariates, h_max, 1.0)),
        CoefStructure::Full => {
            let mut a = Array3::zeros(n_covariates, n_types, h_max);
            for d in 0..n_covariates {
                for j in 0..n_types {
                    for h in 0..h_max {
                        a.set(d, j, h, rng.sample(StandardNormal));
                    }
                }
            }
            Coefficients::Full(a)
        }
        CoefStructure::LowRank(r) => Coefficients::LowRank(CpFactors::new(
            std_normal_matrix(rng, n_covariates, r, 1.0),
            std_normal_matrix(rng, n_types, r, 1.0),
            std_normal_matrix(rng, h_max, r, 1.0),
        )?),
    };
    let (sigma2, effects) = match config.error {
        ErrorStructure::None => (Vec::new(), None),
        ErrorStructure::LowRank(r) => {
            let (shape, rate) = config.ig_hyper;
            let sigma2 = (0..r)
                .map(|_| sample_inverse_gamma(rng, shape, rate))
                .collect::<Result<Vec<_>>>()?;
            let mut e1 = DMatrix::zeros(n_subjects, r);
            for i in 0..n_subjects {
                for k in 0..r {
                    e1[(i, k)] = sigma2[k].sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let e2 = std_normal_matrix(rng, n_types, r, 1.0);
            let e3 = std_normal_matrix(rng, h_max, r, 1.0);
            (sigma2, Some(CpFactors::new(e1, e2, e3)?))
        }
    };
    let (a, b) = config.beta_base;
    let theta = (0..h_max).map(|_| sample_beta(rng, a, b)).collect::<Result<Vec<_>>>()?;
    Ok(ParamState {
        theta,
        zjh,
        alpha,
        coef,
        effects,
        sigma2,
        alloc: vec![0; n_subjects * n_types],
        zstar: Array3::zeros(0, 0, 0),
    })
}

/// Draw `C_ij ~ Categorical(π[i,j,:])` for every cell.
pub fn draw_allocations<R: Rng + ?Sized>(rng: &mut R, sticks: &StickWeights) -> Result<Vec<usize>> {
    let [n1, n2, n3] = sticks.pi.dims();
    let mut logw = vec![0.0; n3];
    let mut alloc = Vec::with_capacity(n1 * n2);
    for i in 0..n1 {
        for j in 0..n2 {
            sticks.log_pi(i, j, &mut logw);
            alloc.push(sample_categorical_log(rng, &logw)?);
        }
    }
    Ok(alloc)
}

/// `Y_ij ~ Binomial(n_ij, θ_{C_ij})`, row-major.
pub fn draw_outcomes<R: Rng + ?Sized>(rng: &mut R, state: &ParamState, trials: &[u64]) -> Result<Vec<u64>> {
    state
        .alloc
        .iter()
        .zip(trials)
        .map(|(&c, &n)| sample_binomial(rng, n, state.theta[c]))
        .collect()
}

/// Full prior-generative draw of parameters, allocations and outcomes.
///
/// `x` should already be standardized; `trials` is `I x J` row-major.
pub fn prior_generative_draw<R: Rng + ?Sized>(
    rng: &mut R,
    config: &ModelConfig,
    x: &DMatrix<f64>,
    trials: &[u64],
    n_types: usize,
) -> Result<(ParamState, Dataset)> {
    let n_sub = x.nrows();
    if trials.len() != n_sub * n_types {
        return Err(Error::Dimension(format!(
            "{} trial counts for {n_sub} subjects x {n_types} types",
            trials.len()
        )));
    }
    let mut state = draw_prior_state(rng, config, n_sub, n_types, x.ncols())?;
    let sticks = compute_sticks(&state, x)?;
    state.alloc = draw_allocations(rng, &sticks)?;
    let y = draw_outcomes(rng, &state, trials)?;
    let data = Dataset::from_parts(None, None, None, y, trials.to_vec(), x.clone())?;
    Ok((state, data))
}
