//! Augmented Gibbs sampler for the probit stick-breaking mixture.
//!
//! One sweep updates, in order: allocations, atoms, latent probits, the
//! coefficient factors, the random-effect factors, their scales, the
//! intercepts and the concentration, then recomputes the stick-breaking
//! weights.
//!
//! Latent probits exist only for the *active* cells of each `(i, j)`: the
//! components `h <= C_ij` below the truncation level. Every regression-type
//! update conditions on active cells alone; the remaining entries of `zstar`
//! are never read.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Standardizer};
use crate::error::{Error, Result};
use crate::model::{
    binomial_kernel, compute_sticks, loglik, Coefficients, ErrorStructure, ModelConfig, ParamState,
    StickWeights, CoefStructure,
};
use crate::sampling::{
    sample_beta, sample_categorical_log, sample_inverse_gamma, sample_normal,
    sample_trunc_std_normal, NormalEquations, RngHandle, Side,
};
use crate::store::{DrawStore, StoreMeta};
use crate::tensor::{contract_mode1, cp_compose, Array3, CpFactors};

/// Length, iteration counts and seed of one chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Keep the latent probit array in every retained draw.
    pub store_latents: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { iterations: 2000, burn_in: 1000, thin: 1, seed: 1, store_latents: false }
    }
}

impl ChainConfig {
    pub fn new(iterations: usize, burn_in: usize, seed: u64) -> Self {
        Self { iterations, burn_in, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::Parameter(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::Parameter("thin must be at least 1".into()));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }

    pub fn keeps(&self, iteration: usize) -> bool {
        iteration > self.burn_in && (iteration - self.burn_in) % self.thin == 0
    }
}

/// Smallest and largest atom values the likelihood weights are evaluated at.
const THETA_FLOOR: f64 = 1e-12;

/// Number of latent probits instantiated for an allocation `c` (zero-based)
/// under truncation `h_max`.
#[inline]
pub fn active_len(c: usize, h_max: usize) -> usize {
    (c + 1).min(h_max - 1)
}

fn check_finite(ok: bool, step: &'static str, iteration: usize) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::NonFinite { step, iteration })
    }
}

/// Step 1: allocations given stick weights and atoms.
pub fn update_allocations<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut ParamState,
    data: &Dataset,
    sticks: &StickWeights,
) -> Result<()> {
    let h_max = state.n_components();
    let n_types = data.n_types();
    let log_theta: Vec<(f64, f64)> = state
        .theta
        .iter()
        .map(|&t| {
            let t = t.clamp(THETA_FLOOR, 1.0 - THETA_FLOOR);
            (t, 1.0 - t)
        })
        .collect();
    let mut logw = vec![0.0; h_max];
    for i in 0..data.n_subjects() {
        for j in 0..n_types {
            sticks.log_pi(i, j, &mut logw);
            let (y, n) = (data.y(i, j), data.n(i, j));
            if n > 0 {
                for (w, &(t, _)) in logw.iter_mut().zip(&log_theta) {
                    *w += binomial_kernel(y, n, t);
                }
            }
            state.alloc[i * n_types + j] = sample_categorical_log(rng, &logw)?;
        }
    }
    Ok(())
}

/// Step 2: conjugate Beta update of every atom; empty components draw from
/// the base distribution.
pub fn update_atoms<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut ParamState,
    data: &Dataset,
    beta_base: (f64, f64),
) -> Result<()> {
    let h_max = state.n_components();
    let mut ysum = vec![0u64; h_max];
    let mut nsum = vec![0u64; h_max];
    for (k, &c) in state.alloc.iter().enumerate() {
        ysum[c] += data.y_all()[k];
        nsum[c] += data.n_all()[k];
    }
    let (a, b) = beta_base;
    for h in 0..h_max {
        let draw = sample_beta(rng, a + ysum[h] as f64, b + (nsum[h] - ysum[h]) as f64)?;
        state.theta[h] = interior(draw);
    }
    Ok(())
}

/// Nudge a probability off the boundary of (0, 1).
fn interior(p: f64) -> f64 {
    if p <= 0.0 {
        f64::MIN_POSITIVE
    } else if p >= 1.0 {
        1.0 - f64::EPSILON / 2.0
    } else {
        p
    }
}

/// Step 3: latent probits for the active cells, truncated negative below the
/// allocation and positive at it.
pub fn update_latent_probits<R: Rng + ?Sized>(rng: &mut R, state: &mut ParamState, eta: &Array3) {
    let [n_sub, n_types, h_max] = eta.dims();
    for i in 0..n_sub {
        for j in 0..n_types {
            let c = state.alloc[i * n_types + j];
            let mu = eta.fiber(i, j);
            let z = state.zstar.fiber_mut(i, j);
            for h in 0..active_len(c, h_max) {
                let side = if h < c { Side::Negative } else { Side::Positive };
                z[h] = sample_trunc_std_normal(rng, mu[h], side);
            }
        }
    }
}

/// Visit every active cell `(i, j, h)`.
#[inline]
fn for_each_active(alloc: &[usize], dims: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [n_sub, n_types, h_max] = dims;
    for i in 0..n_sub {
        for j in 0..n_types {
            for h in 0..active_len(alloc[i * n_types + j], h_max) {
                f(i, j, h);
            }
        }
    }
}

/// Residual `zstar - Z_jh - extra` (extra = random effects or covariate term).
fn residual(state: &ParamState, extra: &[Option<&Array3>]) -> Array3 {
    let dims = state.zstar.dims();
    let mut r = Array3::from_fn(dims, |i, j, h| state.zstar.get(i, j, h) - state.zjh[(j, h)]);
    for a in extra.iter().flatten() {
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for (v, e) in r.fiber_mut(i, j).iter_mut().zip(a.fiber(i, j)) {
                    *v -= e;
                }
            }
        }
    }
    r
}

fn dense_effects(state: &ParamState) -> Option<Array3> {
    state.effects.as_ref().map(cp_compose)
}

fn dense_covariate_term(state: &ParamState, x: &DMatrix<f64>) -> Result<Option<Array3>> {
    match state.coef.dense(state.n_types()) {
        Some(b) => Ok(Some(contract_mode1(x, &b)?)),
        None => Ok(None),
    }
}

/// Step 4: coefficient update given latent probits, intercepts and effects.
pub fn update_coefficients<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut ParamState,
    x: &DMatrix<f64>,
) -> Result<()> {
    if matches!(state.coef, Coefficients::None) {
        return Ok(());
    }
    let e = dense_effects(state);
    let target = residual(state, &[e.as_ref()]);
    let dims = target.dims();
    let [n_sub, n_types, h_max] = dims;
    let d = x.ncols();
    let alloc = state.alloc.clone();
    match &mut state.coef {
        Coefficients::None => {}
        Coefficients::Shared(b) => {
            let mut eqs: Vec<NormalEquations> = (0..h_max).map(|_| NormalEquations::new(d)).collect();
            let mut row = vec![0.0; d];
            for_each_active(&alloc, dims, |i, j, h| {
                row.iter_mut().enumerate().for_each(|(k, v)| *v = x[(i, k)]);
                eqs[h].add_row(&row, target.get(i, j, h));
            });
            for (h, ne) in eqs.into_iter().enumerate() {
                let draw = ne.posterior(&vec![1.0; d])?.sample(rng);
                for k in 0..d {
                    b[(k, h)] = draw[k];
                }
            }
        }
        Coefficients::Full(b) => {
            let mut eqs: Vec<NormalEquations> =
                (0..n_types * h_max).map(|_| NormalEquations::new(d)).collect();
            let mut row = vec![0.0; d];
            for_each_active(&alloc, dims, |i, j, h| {
                row.iter_mut().enumerate().for_each(|(k, v)| *v = x[(i, k)]);
                eqs[j * h_max + h].add_row(&row, target.get(i, j, h));
            });
            for (cell, ne) in eqs.into_iter().enumerate() {
                let draw = ne.posterior(&vec![1.0; d])?.sample(rng);
                for k in 0..d {
                    b.set(k, cell / h_max, cell % h_max, draw[k]);
                }
            }
        }
        Coefficients::LowRank(f) => {
            let rank = f.rank();
            // B1: all of vec(B1) jointly, index (k, r) -> k * rank + r.
            let q = d * rank;
            let mut ne = NormalEquations::new(q);
            let mut row = vec![0.0; q];
            let mut g = vec![0.0; rank];
            for_each_active(&alloc, dims, |i, j, h| {
                for r in 0..rank {
                    g[r] = f.f2[(j, r)] * f.f3[(h, r)];
                }
                for k in 0..d {
                    let xv = x[(i, k)];
                    for r in 0..rank {
                        row[k * rank + r] = xv * g[r];
                    }
                }
                ne.add_row(&row, target.get(i, j, h));
            });
            let draw = ne.posterior(&vec![1.0; q])?.sample(rng);
            for k in 0..d {
                for r in 0..rank {
                    f.f1[(k, r)] = draw[k * rank + r];
                }
            }

            let xb1 = x * &f.f1;
            // B2 rows over types.
            let mut eqs: Vec<NormalEquations> = (0..n_types).map(|_| NormalEquations::new(rank)).collect();
            let mut row = vec![0.0; rank];
            for_each_active(&alloc, dims, |i, j, h| {
                for r in 0..rank {
                    row[r] = xb1[(i, r)] * f.f3[(h, r)];
                }
                eqs[j].add_row(&row, target.get(i, j, h));
            });
            for (j, ne) in eqs.into_iter().enumerate() {
                let draw = ne.posterior(&vec![1.0; rank])?.sample(rng);
                for r in 0..rank {
                    f.f2[(j, r)] = draw[r];
                }
            }

            // B3 rows over components.
            let mut eqs: Vec<NormalEquations> = (0..h_max).map(|_| NormalEquations::new(rank)).collect();
            for_each_active(&alloc, dims, |i, j, h| {
                for r in 0..rank {
                    row[r] = xb1[(i, r)] * f.f2[(j, r)];
                }
                eqs[h].add_row(&row, target.get(i, j, h));
            });
            for (h, ne) in eqs.into_iter().enumerate() {
                let draw = ne.posterior(&vec![1.0; rank])?.sample(rng);
                for r in 0..rank {
                    f.f3[(h, r)] = draw[r];
                }
            }
            let _ = n_sub;
        }
    }
    Ok(())
}

/// Step 5: random-effect factors. Rows of E1 use prior precision `1/σ²_r`;
/// rows of E2 and E3 use unit precision.
pub fn update_individual_effects<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut ParamState,
    x: &DMatrix<f64>,
) -> Result<()> {
    if state.effects.is_none() {
        return Ok(());
    }
    let xb = dense_covariate_term(state, x)?;
    let target = residual(state, &[xb.as_ref()]);
    let dims = target.dims();
    let [n_sub, n_types, h_max] = dims;
    let alloc = state.alloc.clone();
    let e1_prec: Vec<f64> = state.sigma2.iter().map(|s| 1.0 / s).collect();
    let f = state.effects.as_mut().expect("checked above");
    let rank = f.rank();
    let unit = vec![1.0; rank];
    let mut row = vec![0.0; rank];

    let mut eqs: Vec<NormalEquations> = (0..n_sub).map(|_| NormalEquations::new(rank)).collect();
    for_each_active(&alloc, dims, |i, j, h| {
        for r in 0..rank {
            row[r] = f.f2[(j, r)] * f.f3[(h, r)];
        }
        eqs[i].add_row(&row, target.get(i, j, h));
    });
    for (i, ne) in eqs.into_iter().enumerate() {
        let draw = ne.posterior(&e1_prec)?.sample(rng);
        for r in 0..rank {
            f.f1[(i, r)] = draw[r];
        }
    }

    let mut eqs: Vec<NormalEquations> = (0..n_types).map(|_| NormalEquations::new(rank)).collect();
    for_each_active(&alloc, dims, |i, j, h| {
        for r in 0..rank {
            row[r] = f.f1[(i, r)] * f.f3[(h, r)];
        }
        eqs[j].add_row(&row, target.get(i, j, h));
    });
    for (j, ne) in eqs.into_iter().enumerate() {
        let draw = ne.posterior(&unit)?.sample(rng);
        for r in 0..rank {
            f.f2[(j, r)] = draw[r];
        }
    }

    let mut eqs: Vec<NormalEquations> = (0..h_max).map(|_| NormalEquations::new(rank)).collect();
    for_each_active(&alloc, dims, |i, j, h| {
        for r in 0..rank {
            row[r] = f.f1[(i, r)] * f.f2[(j, r)];
        }
        eqs[h].add_row(&row, target.get(i, j, h));
    });
    for (h, ne) in eqs.into_iter().enumerate() {
        let draw = ne.posterior(&unit)?.sample(rng);
        for r in 0..rank {
            f.f3[(h, r)] = draw[r];
        }
    }
    Ok(())
}

/// Step 6: σ²_r ~ IG(shape + I/2, rate + Σ_i E1[i,r]² / 2).
pub fn update_scales<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut ParamState,
    ig_hyper: (f64, f64),
) -> Result<()> {
    let Some(f) = &state.effects else { return Ok(()) };
    let n_sub = f.f1.nrows() as f64;
    for r in 0..f.rank() {
        let ss: f64 = f.f1.column(r).iter().map(|v| v * v).sum();
        state.sigma2[r] = sample_inverse_gamma(rng, ig_hyper.0 + 0.5 * n_sub, ig_hyper.1 + 0.5 * ss)?;
    }
    Ok(())
}

/// Step 7: intercepts from the active residuals, prior N(α, 1).
pub fn update_intercepts<R: Rng + ?Sized>(
    rng: &mut R,
    state: &mut ParamState,
    x: &DMatrix<f64>,
) -> Result<()> {
    let xb = dense_covariate_term(state, x)?;
    let e = dense_effects(state);
    let dims = state.zstar.dims();
    let (n_types, h_max) = (dims[1], dims[2]);
    let mut sum = DMatrix::<f64>::zeros(n_types, h_max);
    let mut count = DMatrix::<f64>::zeros(n_types, h_max);
    for_each_active(&state.alloc, dims, |i, j, h| {
        let mut z = state.zstar.get(i, j, h);
        if let Some(xb) = &xb {
            z -= xb.get(i, j, h);
        }
        if let Some(e) = &e {
            z -= e.get(i, j, h);
        }
        sum[(j, h)] += z;
        count[(j, h)] += 1.0;
    });
    for j in 0..n_types {
        for h in 0..h_max {
            let prec = count[(j, h)] + 1.0;
            state.zjh[(j, h)] = sample_normal(rng, (state.alpha + sum[(j, h)]) / prec, 1.0 / prec)?;
        }
    }
    Ok(())
}

/// Step 8: α ~ N(ΣZ_jh / (JH + 1), 1 / (JH + 1)).
pub fn update_concentration<R: Rng + ?Sized>(rng: &mut R, state: &mut ParamState) -> Result<()> {
    let prec = state.zjh.len() as f64 + 1.0;
    state.alpha = sample_normal(rng, state.zjh.sum() / prec, 1.0 / prec)?;
    Ok(())
}

/// Starting state: sorted prior atoms, small factor entries, unit scales and
/// allocations at the highest prior-weight-times-likelihood component.
pub fn initial_state<R: Rng + ?Sized>(
    rng: &mut R,
    model: &ModelConfig,
    data: &Dataset,
) -> Result<ParamState> {
    let (n_sub, n_types, d) = (data.n_subjects(), data.n_types(), data.n_covariates());
    let h_max = model.h;
    let (a, b) = model.beta_base;
    let mut theta = (0..h_max).map(|_| sample_beta(rng, a, b).map(interior)).collect::<Result<Vec<_>>>()?;
    theta.sort_by(|p, q| q.total_cmp(p));
    let small = |rng: &mut R, r: usize, c: usize| {
        let mut m = DMatrix::zeros(r, c);
        for i in 0..r {
            for k in 0..c {
                m[(i, k)] = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        m
    };
    let coef = match model.coef {
        CoefStructure::None => Coefficients::None,
        CoefStructure::SharedTypes => Coefficients::Shared(small(rng, d, h_max)),
        CoefStructure::Full => {
            let m = small(rng, d, n_types * h_max);
            Coefficients::Full(Array3::from_fn([d, n_types, h_max], |k, j, h| m[(k, j * h_max + h)]))
        }
        CoefStructure::LowRank(r) => Coefficients::LowRank(CpFactors::new(
            small(rng, d, r),
            small(rng, n_types, r),
            small(rng, h_max, r),
        )?),
    };
    let (effects, sigma2) = match model.error {
        ErrorStructure::None => (None, Vec::new()),
        ErrorStructure::LowRank(r) => (
            Some(CpFactors::new(small(rng, n_sub, r), small(rng, n_types, r), small(rng, h_max, r))?),
            vec![1.0; r],
        ),
    };
    let mut state = ParamState {
        theta,
        zjh: DMatrix::zeros(n_types, h_max),
        alpha: 0.0,
        coef,
        effects,
        sigma2,
        alloc: vec![0; n_sub * n_types],
        zstar: Array3::zeros(n_sub, n_types, h_max),
    };
    let sticks = compute_sticks(&state, data.x())?;
    let mut logw = vec![0.0; h_max];
    for i in 0..n_sub {
        for j in 0..n_types {
            sticks.log_pi(i, j, &mut logw);
            let (y, n) = (data.y(i, j), data.n(i, j));
            let best = (0..h_max)
                .map(|h| {
                    let t = state.theta[h].clamp(THETA_FLOOR, 1.0 - THETA_FLOOR);
                    logw[h] + binomial_kernel(y, n, t)
                })
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (h, w)| if w > acc.1 { (h, w) } else { acc });
            state.alloc[i * n_types + j] = best.0;
        }
    }
    Ok(state)
}

/// Stateful sampler over a dataset whose covariates are used as given.
#[derive(Debug, Clone)]
pub struct Sampler {
    model: ModelConfig,
    data: Dataset,
    state: ParamState,
    sticks: StickWeights,
    iteration: usize,
}

impl Sampler {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, model: &ModelConfig, data: Dataset) -> Result<Self> {
        model.validate()?;
        let state = initial_state(rng, model, &data)?;
        Self::from_state(model, data, state)
    }

    /// Resume from an explicit state (latents are (re)allocated as needed).
    pub fn from_state(model: &ModelConfig, data: Dataset, mut state: ParamState) -> Result<Self> {
        let dims = [data.n_subjects(), data.n_types(), model.h];
        if state.zstar.dims() != dims {
            state.zstar = Array3::zeros(dims[0], dims[1], dims[2]);
        }
        let sticks = compute_sticks(&state, data.x())?;
        Ok(Self { model: model.clone(), data, state, sticks, iteration: 0 })
    }

    pub fn state(&self) -> &ParamState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ParamState {
        &mut self.state
    }

    pub fn sticks(&self) -> &StickWeights {
        &self.sticks
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    /// Swap in new outcome counts (same trials and covariates).
    pub fn set_outcomes(&mut self, y: Vec<u64>) -> Result<()> {
        self.data = self.data.with_outcomes(y)?;
        Ok(())
    }

    /// Recompute the stick weights from the current state.
    pub fn refresh_sticks(&mut self) -> Result<()> {
        self.sticks = compute_sticks(&self.state, self.data.x())?;
        Ok(())
    }

    /// One full sweep.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.iteration += 1;
        let it = self.iteration;
        let x = self.data.x();
        let s = &mut self.state;

        update_allocations(rng, s, &self.data, &self.sticks)?;
        update_atoms(rng, s, &self.data, self.model.beta_base)?;
        check_finite(s.theta.iter().all(|t| t.is_finite()), "atoms", it)?;
        update_latent_probits(rng, s, &self.sticks.eta);
        check_finite(s.zstar.is_finite(), "latent_probits", it)?;
        update_coefficients(rng, s, x)?;
        check_finite(s.coef.is_finite(), "coefficients", it)?;
        update_individual_effects(rng, s, x)?;
        check_finite(s.effects.as_ref().is_none_or(|f| f.is_finite()), "individual_effects", it)?;
        update_scales(rng, s, self.model.ig_hyper)?;
        check_finite(s.sigma2.iter().all(|v| v.is_finite() && *v > 0.0), "scales", it)?;
        update_intercepts(rng, s, x)?;
        check_finite(s.zjh.iter().all(|v| v.is_finite()), "intercepts", it)?;
        update_concentration(rng, s)?;
        check_finite(s.alpha.is_finite(), "concentration", it)?;
        self.sticks = compute_sticks(s, x).map_err(|_| Error::NonFinite { step: "sticks", iteration: it })?;
        Ok(())
    }
}

/// Fit one chain. Covariates are standardized with the training statistics,
/// which are stored alongside the draws.
pub fn run_chain(chain: &ChainConfig, model: &ModelConfig, data: &Dataset) -> Result<DrawStore> {
    chain.validate()?;
    model.validate()?;
    let standardizer = Standardizer::fit(data.x());
    let train = data.with_covariates(standardizer.transform(data.x()))?;
    let meta = StoreMeta::for_psb(model, chain, data, &standardizer);
    let mut rng = RngHandle::new(chain.seed);
    let mut sampler = Sampler::new(&mut rng, model, train)?;
    let mut draws = Vec::with_capacity(chain.retained());
    let mut ll = Vec::with_capacity(chain.retained());
    for t in 1..=chain.iterations {
        sampler.sweep(&mut rng)?;
        if chain.keeps(t) {
            let st = sampler.state();
            ll.push(loglik(st, sampler.data())?);
            draws.push(if chain.store_latents { st.clone() } else { st.without_latents() });
        }
    }
    Ok(DrawStore::new(meta, draws, ll))
}

/// Posterior mean of a gaussian-conditional row, handy for tests.
pub fn posterior_mean_of_rows(ne: NormalEquations, prec: &[f64]) -> Result<DVector<f64>> {
    Ok(ne.posterior(prec)?.mean)
}
