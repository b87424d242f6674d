//! Seeded sampling primitives: the standard normal CDF and quantile,
//! truncated normals, the conjugate families used by the sampler, log-space
//! categorical draws and the Gaussian linear-model posterior.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Binomial, Distribution, Gamma, StandardNormal};
use libm::erfc;

use crate::error::{Error, Result};

/// Single-owner random stream. ChaCha8 keeps draws identical across platforms.
#[derive(Debug, Clone)]
pub struct RngHandle {
    seed: u64,
    inner: ChaCha8Rng,
}

impl RngHandle {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; the same `(seed, stream)` pair always yields
    /// the same child.
    pub fn substream(&self, stream: u64) -> RngHandle {
        RngHandle::new(derive_seed(self.seed, stream))
    }
}

impl RngCore for RngHandle {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// SplitMix64 finalizer over `seed` and a stream tag.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Φ(x).
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// log Φ(x), accurate in the far lower tail where Φ underflows.
pub fn std_normal_log_cdf(x: f64) -> f64 {
    if x > -30.0 {
        return std_normal_cdf(x).ln();
    }
    // Asymptotic Mills-ratio expansion.
    let x2 = x * x;
    let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2);
    -0.5 * x2 - LN_SQRT_2PI - (-x).ln() + series.ln()
}

/// Φ⁻¹(p) by Wichura's AS241 (PPND16), relative accuracy about 1e-16.
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.080_928_730_122_7 * r + 33430.575_583_588_128) * r
                + 67265.770_927_008_7)
                * r
                + 45921.953_931_549_87)
                * r
                + 13731.693_765_509_46)
                * r
                + 1971.590_950_306_551_3)
                * r
                + 133.141_667_891_784_38)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((5226.495_278_852_545 * r + 28729.085_735_721_943) * r
                + 39307.895_800_092_71)
                * r
                + 21213.794_301_586_597)
                * r
                + 5394.196_021_424_751)
                * r
                + 687.187_007_492_057_9)
                * r
                + 42.313_330_701_600_91)
                * r
                + 1.0);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    let mut r = (-tail.ln()).sqrt();
    let val = if r <= 5.0 {
        r -= 1.6;
        (((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
                + 0.015_198_666_563_616_457)
                * r
                + 0.148_103_976_427_480_08)
                * r
                + 0.689_767_334_985_1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103)
            / (((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_888)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Which half-line a truncated normal draw is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Positive,
    Negative,
}

/// Mean magnitude beyond which inversion gives way to rejection.
const INVERSION_LIMIT: f64 = 5.0;

/// Draw from N(mean, 1) restricted to the open half-line given by `side`.
pub fn sample_trunc_std_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, side: Side) -> f64 {
    match side {
        Side::Positive => positive_trunc_normal(rng, mean),
        Side::Negative => -positive_trunc_normal(rng, -mean),
    }
}

/// N(mean, 1) conditioned on being > 0.
fn positive_trunc_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> f64 {
    if mean > INVERSION_LIMIT {
        // Acceptance probability is at least Φ(5).
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let x = mean + z;
            if x > 0.0 {
                return x;
            }
        }
    }
    if mean < -INVERSION_LIMIT {
        // Standardized lower bound a = -mean > 5: exponential proposals with the
        // optimal rate for the tail (Robert, 1995).
        let a = -mean;
        let lambda = 0.5 * (a + (a * a + 4.0).sqrt());
        loop {
            let u: f64 = rng.random();
            let z = a - (1.0 - u).ln() / lambda;
            let accept = (-0.5 * (z - lambda) * (z - lambda)).exp();
            if rng.random::<f64>() <= accept {
                let x = z - a;
                if x > 0.0 {
                    return x;
                }
            }
        }
    }
    // Z > -mean  <=>  -Z < mean, and -Z | (-Z < mean) = Φ⁻¹(u Φ(mean)).
    let upper = std_normal_cdf(mean);
    loop {
        let u = 1.0 - rng.random::<f64>();
        let z = -std_normal_quantile(u * upper);
        let x = mean + z;
        if x > 0.0 && x.is_finite() {
            return x;
        }
    }
}

pub fn sample_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, var: f64) -> Result<f64> {
    if !(var >= 0.0) || !mean.is_finite() || !var.is_finite() {
        return Err(Error::Parameter(format!("normal with mean {mean}, variance {var}")));
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok(mean + var.sqrt() * z)
}

pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> Result<f64> {
    let dist = Beta::new(a, b).map_err(|e| Error::Parameter(format!("Beta({a}, {b}): {e}")))?;
    Ok(dist.sample(rng))
}

/// Shape/rate inverse gamma: density ∝ x^(-shape-1) exp(-rate/x).
pub fn sample_inverse_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && rate > 0.0) || !shape.is_finite() || !rate.is_finite() {
        return Err(Error::Parameter(format!("inverse gamma shape {shape}, rate {rate}")));
    }
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Parameter(format!("Gamma({shape}, 1/{rate}): {e}")))?;
    Ok(1.0 / g.sample(rng))
}

pub fn sample_binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> Result<u64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!("binomial probability {p}")));
    }
    let dist = Binomial::new(n, p).map_err(|e| Error::Parameter(format!("Binomial({n}, {p}): {e}")))?;
    Ok(dist.sample(rng))
}

/// Index `h` with probability `exp(logw[h]) / sum exp(logw)`.
pub fn sample_categorical_log<R: Rng + ?Sized>(rng: &mut R, logw: &[f64]) -> Result<usize> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let total: f64 = logw.iter().map(|&l| (l - max).exp()).sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (h, &l) in logw.iter().enumerate() {
        let w = (l - max).exp();
        if w > 0.0 {
            if u < w {
                return Ok(h);
            }
            u -= w;
            last = h;
        }
    }
    Ok(last)
}

/// Gaussian conditional of a coefficient vector in a unit-noise linear model.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    chol_lower: DMatrix<f64>,
}

impl GaussianPosterior {
    /// Posterior from sufficient statistics `WᵀW`, `Wᵀz` and a diagonal prior
    /// precision (zero prior mean).
    pub fn from_stats(wtw: DMatrix<f64>, wtz: DVector<f64>, prior_prec: &[f64]) -> Result<Self> {
        let q = prior_prec.len();
        if wtw.nrows() != q || wtw.ncols() != q || wtz.len() != q {
            return Err(Error::Dimension(format!(
                "normal equations {}x{} / {} against {q} prior precisions",
                wtw.nrows(),
                wtw.ncols(),
                wtz.len()
            )));
        }
        if prior_prec.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::Parameter("prior precisions must be positive".into()));
        }
        let mut precision = wtw;
        for (k, &p) in prior_prec.iter().enumerate() {
            precision[(k, k)] += p;
        }
        let chol = precision
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Invariant("posterior precision is not positive definite".into()))?;
        let mean = chol.solve(&wtz);
        let mut covariance = chol.inverse();
        covariance = (&covariance + covariance.transpose()) * 0.5;
        let chol_lower = covariance
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Invariant("posterior covariance is not positive definite".into()))?
            .unpack();
        Ok(Self { mean, covariance, chol_lower })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + &self.chol_lower * z
    }
}

/// Conjugate update for `z = W c + noise`, noise ~ N(0, I), c ~ N(0, diag(prior_prec)⁻¹).
pub fn gaussian_linear_update(
    w: &DMatrix<f64>,
    z: &DVector<f64>,
    prior_prec: &[f64],
) -> Result<GaussianPosterior> {
    if w.nrows() != z.len() {
        return Err(Error::Dimension(format!("{} design rows, {} targets", w.nrows(), z.len())));
    }
    if w.ncols() != prior_prec.len() {
        return Err(Error::Dimension(format!(
            "{} design columns, {} prior precisions",
            w.ncols(),
            prior_prec.len()
        )));
    }
    GaussianPosterior::from_stats(w.transpose() * w, w.transpose() * z, prior_prec)
}

/// Incrementally accumulated `WᵀW` and `Wᵀz`, one design row at a time.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    pub wtw: DMatrix<f64>,
    pub wtz: DVector<f64>,
}

impl NormalEquations {
    pub fn new(q: usize) -> Self {
        Self { wtw: DMatrix::zeros(q, q), wtz: DVector::zeros(q) }
    }

    #[inline]
    pub fn add_row(&mut self, row: &[f64], target: f64) {
        let q = row.len();
        for a in 0..q {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            self.wtz[a] += ra * target;
            for b in a..q {
                self.wtw[(a, b)] += ra * row[b];
            }
        }
    }

    pub fn posterior(mut self, prior_prec: &[f64]) -> Result<GaussianPosterior> {
        let q = self.wtz.len();
        for a in 0..q {
            for b in 0..a {
                self.wtw[(a, b)] = self.wtw[(b, a)];
            }
        }
        GaussianPosterior::from_stats(self.wtw, self.wtz, prior_prec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    /// Composite Simpson integral of the standard normal density over [lo, hi].
    fn simpson_normal(lo: f64, hi: f64, n: usize) -> f64 {
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let h = (hi - lo) / n as f64;
        let mut s = pdf(lo) + pdf(hi);
        for k in 1..n {
            let x = lo + k as f64 * h;
            s += if k % 2 == 1 { 4.0 } else { 2.0 } * pdf(x);
        }
        s * h / 3.0
    }

    #[test]
    fn cdf_symmetry_and_quadrature() {
        assert_eq!(std_normal_cdf(0.0), 0.5);
        for &x in &[0.1, 0.7, 1.3, 2.9, 5.5] {
            assert!((std_normal_cdf(x) + std_normal_cdf(-x) - 1.0).abs() < 1e-15);
        }
        let oracle = 0.5 + simpson_normal(0.0, 1.959964, 20_000);
        assert!((std_normal_cdf(1.959964) - oracle).abs() < 1e-12);
        assert!((std_normal_cdf(1.959964) - 0.975).abs() < 1e-6);
        for &x in &[-3.0, -1.0, 0.4, 2.2] {
            let oracle = 0.5 + simpson_normal(0.0, x, 20_000);
            assert!((std_normal_cdf(x) - oracle).abs() < 1e-12, "x = {x}");
        }
    }

    #[test]
    fn log_cdf_tail_is_continuous() {
        let a = std_normal_log_cdf(-29.999_999);
        let b = std_normal_log_cdf(-30.000_001);
        assert!((a - b).abs() < 1e-3);
        assert!(std_normal_log_cdf(-60.0).is_finite());
        assert!((std_normal_log_cdf(1.0) - std_normal_cdf(1.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &p in &[1e-300, 1e-12, 0.001, 0.025, 0.3, 0.5, 0.8, 0.975, 0.999_999] {
            let x = std_normal_quantile(p);
            assert!((std_normal_cdf(x) - p).abs() <= 1e-13 * p.max(1e-3), "p = {p}");
        }
    }

    #[test]
    fn truncated_normal_mean_zero_positive() {
        let mut rng = RngHandle::new(11);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| sample_trunc_std_normal(&mut rng, 0.0, Side::Positive))
            .collect();
        let (m, _) = mean_var(&xs);
        assert!((m - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.01);
        assert!(xs.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn truncated_normal_inactive_truncation() {
        let mut rng = RngHandle::new(12);
        let xs: Vec<f64> = (0..20_000)
            .map(|_| sample_trunc_std_normal(&mut rng, 10.0, Side::Positive))
            .collect();
        assert!(xs.iter().all(|&x| x > 0.0));
        assert!((mean_var(&xs).0 - 10.0).abs() < 0.05);
    }

    /// Inverse-CDF oracle in the upper tail: for a > 0 the truncated mean is
    /// φ(a)/Q(a) - a above the bound, with Q computed via erfc.
    #[test]
    fn truncated_normal_far_tail_matches_analytic() {
        let mut rng = RngHandle::new(13);
        for &mean in &[-8.0_f64, -12.0, -30.0] {
            let xs: Vec<f64> = (0..50_000)
                .map(|_| sample_trunc_std_normal(&mut rng, mean, Side::Positive))
                .collect();
            assert!(xs.iter().all(|&x| x > 0.0 && x.is_finite()));
            let a = -mean;
            let pdf = (-0.5 * a * a - LN_SQRT_2PI).exp();
            let q = 0.5 * erfc(a * FRAC_1_SQRT_2);
            let excess = pdf / q - a;
            let (m, _) = mean_var(&xs);
            assert!((m - excess).abs() < 0.05 * excess + 1e-3, "mean {mean}: {m} vs {excess}");
        }
    }

    #[test]
    fn truncation_side_never_violated() {
        let mut rng = RngHandle::new(14);
        for m in -30..=30 {
            for _ in 0..200 {
                assert!(sample_trunc_std_normal(&mut rng, m as f64, Side::Positive) > 0.0);
                assert!(sample_trunc_std_normal(&mut rng, m as f64, Side::Negative) < 0.0);
            }
        }
    }

    #[test]
    fn beta_uniform_mean() {
        let mut rng = RngHandle::new(15);
        let xs: Vec<f64> = (0..100_000).map(|_| sample_beta(&mut rng, 1.0, 1.0).unwrap()).collect();
        assert!((mean_var(&xs).0 - 0.5).abs() < 0.005);
        assert!(sample_beta(&mut rng, 0.0, 1.0).is_err());
    }

    #[test]
    fn binomial_boundaries() {
        let mut rng = RngHandle::new(16);
        for _ in 0..100 {
            assert_eq!(sample_binomial(&mut rng, 48, 0.0).unwrap(), 0);
            assert_eq!(sample_binomial(&mut rng, 48, 1.0).unwrap(), 48);
        }
        assert!(sample_binomial(&mut rng, 3, 1.5).is_err());
    }

    #[test]
    fn inverse_gamma_is_shape_rate() {
        let mut rng = RngHandle::new(17);
        let xs: Vec<f64> =
            (0..100_000).map(|_| sample_inverse_gamma(&mut rng, 3.0, 2.0).unwrap()).collect();
        assert!((mean_var(&xs).0 - 1.0).abs() < 0.02);
        assert!(sample_inverse_gamma(&mut rng, -1.0, 2.0).is_err());
    }

    /// Mean and variance within five Monte Carlo standard errors for each family.
    #[test]
    fn family_moments_within_five_standard_errors() {
        let n = 100_000;
        let mut rng = RngHandle::new(18);
        let check = |xs: &[f64], mean: f64, var: f64, kurt_var: f64| {
            let (m, v) = mean_var(xs);
            let se_m = (var / xs.len() as f64).sqrt();
            let se_v = (kurt_var / xs.len() as f64).sqrt();
            assert!((m - mean).abs() < 5.0 * se_m, "mean {m} vs {mean}");
            assert!((v - var).abs() < 5.0 * se_v, "var {v} vs {var}");
        };
        // Normal(1, 4): var of sample var ~ 2 sigma^4.
        let xs: Vec<f64> = (0..n).map(|_| sample_normal(&mut rng, 1.0, 4.0).unwrap()).collect();
        check(&xs, 1.0, 4.0, 2.0 * 16.0);
        // Beta(2, 5)
        let (a, b) = (2.0, 5.0);
        let bm = a / (a + b);
        let bv = a * b / ((a + b) * (a + b) * (a + b + 1.0));
        let xs: Vec<f64> = (0..n).map(|_| sample_beta(&mut rng, a, b).unwrap()).collect();
        let m4 = xs.iter().map(|x| (x - bm).powi(4)).sum::<f64>() / n as f64;
        check(&xs, bm, bv, m4 - bv * bv);
        // Binomial(48, 0.3)
        let xs: Vec<f64> =
            (0..n).map(|_| sample_binomial(&mut rng, 48, 0.3).unwrap() as f64).collect();
        let bv = 48.0 * 0.3 * 0.7;
        let m4 = xs.iter().map(|x| (x - 14.4).powi(4)).sum::<f64>() / n as f64;
        check(&xs, 14.4, bv, m4 - bv * bv);
        // Inverse-gamma(8, 7): mean 1, var 1/6.
        let xs: Vec<f64> =
            (0..n).map(|_| sample_inverse_gamma(&mut rng, 8.0, 7.0).unwrap()).collect();
        let m4 = xs.iter().map(|x| (x - 1.0).powi(4)).sum::<f64>() / n as f64;
        check(&xs, 1.0, 1.0 / 6.0, m4 - 1.0 / 36.0);
    }

    #[test]
    fn categorical_degenerate_and_symmetric() {
        let mut rng = RngHandle::new(19);
        let ninf = f64::NEG_INFINITY;
        for _ in 0..1000 {
            assert_eq!(sample_categorical_log(&mut rng, &[0.0, ninf, ninf]).unwrap(), 0);
        }
        let half = 0.5_f64.ln();
        let hits = (0..100_000)
            .filter(|_| sample_categorical_log(&mut rng, &[half, half]).unwrap() == 0)
            .count();
        assert!((hits as f64 / 1e5 - 0.5).abs() < 0.01);
        assert!(matches!(
            sample_categorical_log(&mut rng, &[ninf, ninf]),
            Err(Error::DegenerateWeights)
        ));
    }

    #[test]
    fn categorical_shift_invariance() {
        let mut rng = RngHandle::new(20);
        let n = 100_000;
        let p0 = 1.0 / (1.0 + (-1.0_f64).exp());
        let shifted = (0..n)
            .filter(|_| sample_categorical_log(&mut rng, &[-1000.0, -1001.0]).unwrap() == 0)
            .count() as f64
            / n as f64;
        let plain = (0..n)
            .filter(|_| sample_categorical_log(&mut rng, &[0.0, -1.0]).unwrap() == 0)
            .count() as f64
            / n as f64;
        assert!((shifted - p0).abs() < 0.01);
        assert!((shifted - plain).abs() < 0.01);
    }

    #[test]
    fn linear_update_prior_and_scalar() {
        let post = gaussian_linear_update(&DMatrix::zeros(0, 2), &DVector::zeros(0), &[1.0, 1.0]).unwrap();
        assert_eq!(post.mean, DVector::zeros(2));
        assert!((post.covariance.clone() - DMatrix::identity(2, 2)).abs().max() < 1e-15);

        let post = gaussian_linear_update(
            &DMatrix::from_row_slice(1, 1, &[1.0]),
            &DVector::from_vec(vec![2.0]),
            &[1.0],
        )
        .unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        assert!((post.covariance[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn linear_update_matches_ridge_solve() {
        let mut rng = RngHandle::new(21);
        let w = DMatrix::from_fn(50, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = DVector::from_fn(50, |_, _| rng.sample::<f64, _>(StandardNormal));
        let prec = [0.5, 1.0, 2.0];
        let post = gaussian_linear_update(&w, &z, &prec).unwrap();
        let a = w.transpose() * &w + DMatrix::from_diagonal(&DVector::from_column_slice(&prec));
        let ridge = a.clone().lu().solve(&(w.transpose() * &z)).unwrap();
        assert!((&post.mean - ridge).abs().max() < 1e-10);
        let inv = a.try_inverse().unwrap();
        assert!((&post.covariance - inv).abs().max() < 1e-10);
        assert!((&post.covariance - post.covariance.transpose()).abs().max() < 1e-10);

        let mut ne = NormalEquations::new(3);
        for r in 0..50 {
            let row: Vec<f64> = w.row(r).iter().copied().collect();
            ne.add_row(&row, z[r]);
        }
        let acc = ne.posterior(&prec).unwrap();
        assert!((acc.mean - post.mean).abs().max() < 1e-12);
    }

    #[test]
    fn seeds_reproduce_streams() {
        let mut a = RngHandle::new(99);
        let mut b = RngHandle::new(99);
        let xs: Vec<u64> = (0..32).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..32).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_ne!(derive_seed(99, 0), derive_seed(99, 1));
        let mut c = a.substream(3);
        let mut d = RngHandle::new(99).substream(3);
        assert_eq!(c.next_u64(), d.next_u64());
    }
}
