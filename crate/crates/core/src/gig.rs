//! Generalised inverse Gaussian model with the shape parameter δ on the
//! boundary: density, constrained MLE, limit covariance and the Monte Carlo
//! comparison of scaled estimators against the limit law.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::limitfield::{simulate_limit, GammaSource, LimitFieldSpec, PreMap};
use crate::localsets::{LocalSet, Side};
use crate::seed::{derive_seed, rng_for};
use crate::specfun::{digamma, ln_bessel_k, ln_gamma, sample_gamma, trigamma, PeakedRule};
use crate::stats::{column, ks_or_nan, split_outcomes, zero_fraction, RepFailure};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GigParams {
    pub lambda: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl GigParams {
    pub fn new(lambda: f64, delta: f64, gamma: f64) -> Result<Self> {
        if !(lambda > 0.0 && delta >= 0.0 && gamma > 0.0) || !(lambda + delta + gamma).is_finite() {
            return Err(Error::domain(format!(
                "GIG parameters need λ > 0, δ ≥ 0, γ > 0; got ({lambda}, {delta}, {gamma})"
            )));
        }
        Ok(Self { lambda, delta, gamma })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GigBounds {
    pub lambda_lo: f64,
    pub lambda_hi: f64,
    pub delta_hi: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
}

impl Default for GigBounds {
    fn default() -> Self {
        Self {
            lambda_lo: 2.1,
            lambda_hi: 8.0,
            delta_hi: 3.0,
            gamma_lo: 0.2,
            gamma_hi: 3.0,
        }
    }
}

impl GigBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = 2.0 < self.lambda_lo
            && self.lambda_lo < self.lambda_hi
            && self.lambda_hi.is_finite()
            && 0.0 < self.delta_hi
            && self.delta_hi.is_finite()
            && 0.0 < self.gamma_lo
            && self.gamma_lo < self.gamma_hi
            && self.gamma_hi.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::domain(format!("invalid GIG bounds {self:?}")))
        }
    }
}

/// log density at x.
pub fn gig_logpdf(x: f64, p: &GigParams) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain(format!("GIG density needs x > 0, got {x}")));
    }
    let GigParams { lambda, delta, gamma } = *p;
    if delta == 0.0 {
        // Gamma(λ, γ²/2)
        let rate = 0.5 * gamma * gamma;
        return Ok(lambda * rate.ln() - ln_gamma(lambda) + (lambda - 1.0) * x.ln() - rate * x);
    }
    let norm = lambda * (gamma / delta).ln() - std::f64::consts::LN_2 - ln_bessel_k(lambda, gamma * delta)?;
    Ok(norm + (lambda - 1.0) * x.ln() - 0.5 * (delta * delta / x + gamma * gamma * x))
}

/// Sum of log densities.
pub fn gig_loglik(data: &[f64], p: &GigParams) -> Result<f64> {
    let s = SuffStats::new(data)?;
    Ok(s.n as f64 * s.mean_loglik(&natural(p)))
}

/// Natural coordinates (λ, a, b) = (λ, δ², γ²).
fn natural(p: &GigParams) -> Vector3<f64> {
    Vector3::new(p.lambda, p.delta * p.delta, p.gamma * p.gamma)
}

/// log I, E[T] and Cov[T] for T = (log x, −½/x, −½x) under GIG(λ, a, b), where
/// I = ∫ x^(λ−1) exp(−½(a/x + bx)) dx.
struct Moments {
    log_i: f64,
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
}

fn moments(t: &Vector3<f64>) -> Result<Moments> {
    let (l, a, b) = (t[0], t[1], t[2]);
    if a == 0.0 {
        // Gamma(λ, rate β)
        let beta = 0.5 * b;
        let e_log = digamma(l)? - beta.ln();
        let e_inv = beta / (l - 1.0);
        let e_x = l / beta;
        let v_log = trigamma(l)?;
        let v_inv = beta * beta / ((l - 1.0) * (l - 1.0) * (l - 2.0));
        let v_x = l / (beta * beta);
        let c_log_inv = -beta / ((l - 1.0) * (l - 1.0));
        let c_log_x = 1.0 / beta;
        let c_inv_x = -1.0 / (l - 1.0);
        let mean = Vector3::new(e_log, -0.5 * e_inv, -0.5 * e_x);
        let cov = Matrix3::new(
            v_log,
            -0.5 * c_log_inv,
            -0.5 * c_log_x,
            -0.5 * c_log_inv,
            0.25 * v_inv,
            0.25 * c_inv_x,
            -0.5 * c_log_x,
            0.25 * c_inv_x,
            0.25 * v_x,
        );
        return Ok(Moments {
            log_i: ln_gamma(l) - l * beta.ln(),
            mean,
            cov,
        });
    }
    // substitute x = e^s
    let phi = |s: f64| l * s - 0.5 * (b * s.exp() + a * (-s).exp());
    let mode = ((l + (l * l + a * b).sqrt()) / b).ln();
    let curv = -0.5 * (b * mode.exp() + a * (-mode).exp());
    let rule = PeakedRule::build(phi, mode, curv);
    let total: f64 = rule.w.iter().sum();
    let mut m = Vector3::zeros();
    let mut mm = Matrix3::zeros();
    for (s, w) in rule.s.iter().zip(&rule.w) {
        let tv = Vector3::new(*s, -0.5 * (-s).exp(), -0.5 * s.exp());
        m += tv * *w;
        mm += tv * tv.transpose() * *w;
    }
    m /= total;
    mm /= total;
    Ok(Moments {
        log_i: rule.log_peak + total.ln(),
        mean: m,
        cov: mm - m * m.transpose(),
    })
}

/// Sufficient statistics of a sample.
struct SuffStats {
    n: usize,
    t: Vector3<f64>,
}

impl SuffStats {
    fn new(data: &[f64]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::domain("empty sample"));
        }
        let mut t = Vector3::zeros();
        for &x in data {
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::domain(format!("GIG data must be positive, got {x}")));
            }
            t += Vector3::new(x.ln(), -0.5 / x, -0.5 * x);
        }
        Ok(Self {
            n: data.len(),
            t: t / data.len() as f64,
        })
    }

    fn mean_loglik(&self, th: &Vector3<f64>) -> f64 {
        match moments(th) {
            Ok(m) => th.dot(&self.t) - self.t[0] - m.log_i,
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MleOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            tol: 1e-11,
        }
    }
}

/// Projected Newton ascent of the concave mean log-likelihood over a box
/// in natural coordinates.
fn box_newton(
    stats: &SuffStats,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
    start: Vector3<f64>,
    opts: &MleOptions,
) -> Result<(Vector3<f64>, f64)> {
    let clamp = |v: Vector3<f64>| Vector3::from_fn(|i, _| v[i].clamp(lo[i], hi[i]));
    let mut th = clamp(start);
    let mut f = stats.mean_loglik(&th);
    let mut trace = Vec::new();
    for _ in 0..opts.max_iter {
        let m = moments(&th)?;
        let g = stats.t - m.mean;
        let pg = clamp(th + g) - th;
        trace.push(f);
        if pg.amax() <= opts.tol {
            return Ok((th, f));
        }
        let free: Vec<usize> = (0..3)
            .filter(|&i| !((th[i] <= lo[i] && g[i] <= 0.0) || (th[i] >= hi[i] && g[i] >= 0.0)))
            .collect();
        let mut d = Vector3::zeros();
        let k = free.len();
        if k > 0 {
            let h = DMatrix::from_fn(k, k, |r, c| m.cov[(free[r], free[c])]);
            let rhs = nalgebra::DVector::from_fn(k, |r, _| g[free[r]]);
            let sol = match h.clone().cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => rhs.clone(),
            };
            for (r, &i) in free.iter().enumerate() {
                d[i] = sol[r];
            }
        }
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-14 {
            let cand = clamp(th + d * alpha);
            let fc = stats.mean_loglik(&cand);
            if fc >= f + 1e-4 * g.dot(&(cand - th)) && fc >= f {
                moved = (cand - th).amax() > 0.0;
                th = cand;
                f = fc;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            // no ascent left along the Newton path; accept if stationary to a looser tolerance
            if pg.amax() <= 1e-7 {
                return Ok((th, f));
            }
            break;
        }
    }
    let m = moments(&th)?;
    let pg = clamp(th + (stats.t - m.mean)) - th;
    if pg.amax() <= 1e-7 {
        return Ok((th, f));
    }
    Err(Error::NonConvergence {
        what: "GIG MLE",
        detail: format!("projected gradient {:e}; objective trace {:?}", pg.amax(), trace),
        candidates: vec![th.iter().cloned().collect()],
    })
}

/// Box-constrained maximum likelihood estimate; δ̂ = 0 exactly when the
/// likelihood is nonincreasing in δ² at the δ = 0 profile maximiser.
pub fn gig_mle(data: &[f64], bounds: &GigBounds, opts: &MleOptions) -> Result<GigParams> {
    bounds.validate()?;
    if data.len() < 10 {
        return Err(Error::domain("GIG MLE needs at least 10 observations"));
    }
    let stats = SuffStats::new(data)?;
    let lo = Vector3::new(bounds.lambda_lo, 0.0, bounds.gamma_lo.powi(2));
    let hi = Vector3::new(bounds.lambda_hi, bounds.delta_hi.powi(2), bounds.gamma_hi.powi(2));
    // Gamma moment start
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / data.len() as f64;
    let shape = mean * mean / var.max(1e-300);
    let start = Vector3::new(shape, 0.0, 2.0 * shape / mean);
    let mut hi0 = hi;
    hi0[1] = 0.0;
    let (t0, f0) = box_newton(&stats, &lo, &hi0, start, opts)?;
    let g0 = stats.t - moments(&t0)?.mean;
    let best = if g0[1] <= 0.0 {
        (t0, f0)
    } else {
        let mut cands = vec![box_newton(&stats, &lo, &hi, t0, opts)?];
        let center = (lo + hi) * 0.5;
        if let Ok(c) = box_newton(&stats, &lo, &hi, center, opts) {
            cands.push(c);
        }
        cands.push((t0, f0));
        cands.into_iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("non-empty")
    };
    let th = best.0;
    GigParams::new(th[0], th[1].sqrt(), th[2].sqrt())
}

/// Covariance of the score (log ξ, −½ξ⁻¹, −γξ) for ξ ~ Gamma(λ, γ²/2).
pub fn limit_covariance_c(lambda_star: f64, gamma_star: f64) -> Result<DMatrix<f64>> {
    if !(lambda_star > 2.0) || !(gamma_star > 0.0) {
        return Err(Error::domain("limit covariance needs λ* > 2 and γ* > 0"));
    }
    let k = lambda_star;
    let g = gamma_star;
    let beta = 0.5 * g * g;
    let c11 = trigamma(k)?;
    let c12 = beta / (2.0 * (k - 1.0).powi(2));
    let c13 = -g / beta;
    let c22 = beta * beta / (4.0 * (k - 1.0).powi(2) * (k - 2.0));
    let c23 = -g / (2.0 * (k - 1.0));
    let c33 = g * g * k / (beta * beta);
    Ok(DMatrix::from_row_slice(
        3,
        3,
        &[c11, c12, c13, c12, c22, c23, c13, c23, c33],
    ))
}

/// Limit field Δ·(u₁, u₂², u₃) − ½C[(u₁, u₂², u₃)⊗2] on R × [0, ∞) × R.
pub fn gig_limit_spec(lambda_star: f64, gamma_star: f64) -> Result<LimitFieldSpec> {
    let c = limit_covariance_c(lambda_star, gamma_star)?;
    LimitFieldSpec::new(
        3,
        PreMap::SquareAt(1),
        GammaSource::Fixed(c),
        vec![],
        vec![],
        LocalSet::box_cone(vec![Side::Free, Side::NonNeg, Side::Free]),
    )
}

/// Draw from GIG(λ, δ, γ) by inverting the CDF tabulated on log x.
pub fn sample_gig_inverse_cdf<R: Rng + ?Sized>(p: &GigParams, n: usize, rng: &mut R) -> Vec<f64> {
    let t = natural(p);
    let (l, a, b) = (t[0], t[1], t[2]);
    let phi = |s: f64| l * s - 0.5 * (b * s.exp() + a * (-s).exp());
    let mode = ((l + (l * l + a * b).sqrt()) / b).ln();
    let curv = -0.5 * (b * mode.exp() + a * (-mode).exp());
    let rule = PeakedRule::build(phi, mode, curv);
    let h = rule.s[1] - rule.s[0];
    let mut cdf = Vec::with_capacity(rule.w.len());
    let mut acc = 0.0;
    for w in &rule.w {
        acc += w;
        cdf.push(acc);
    }
    (0..n)
        .map(|_| {
            let u = rng.gen::<f64>() * acc;
            let i = cdf.partition_point(|c| *c < u).min(cdf.len() - 1);
            // weight i is the mass of the cell of width h centred at s_i
            let c0 = if i == 0 { 0.0 } else { cdf[i - 1] };
            let frac = (u - c0) / (cdf[i] - c0);
            (rule.s[i] + (frac - 0.5) * h).exp()
        })
        .collect()
}

/// Draws from the Gamma truth δ* = 0.
pub fn sample_gamma_truth<R: Rng + ?Sized>(lambda: f64, gamma: f64, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    (0..n).map(|_| sample_gamma(lambda, 0.5 * gamma * gamma, rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GigExperimentConfig {
    pub lambda_star: f64,
    pub gamma_star: f64,
    #[serde(default)]
    pub bounds: GigBounds,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    #[serde(default = "default_limit_draws")]
    pub limit_draws: usize,
    pub seed: u64,
}

fn default_limit_draws() -> usize {
    10_000
}

/// Scaled estimators at one sample size.
#[derive(Clone, Debug, PartialEq)]
pub struct GigCell {
    pub n: usize,
    /// replication index of each row
    pub reps: Vec<usize>,
    /// rows (n^½(λ̂ − λ*), n^¼ δ̂, n^½(γ̂ − γ*))
    pub rows: Vec<Vec<f64>>,
    pub ks: [f64; 3],
    pub zero_fraction: f64,
    pub failures: Vec<RepFailure>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GigSummary {
    pub cells: Vec<GigCell>,
    pub limit_rows: Vec<Vec<f64>>,
    pub limit_zero_fraction: f64,
}

/// Rate schedule diag(n^−½, n^−¼, n^−½) applied to one estimate.
pub fn scaled_estimate(est: &GigParams, lambda_star: f64, gamma_star: f64, n: usize) -> Vec<f64> {
    let nf = n as f64;
    vec![
        nf.sqrt() * (est.lambda - lambda_star),
        nf.powf(0.25) * est.delta,
        nf.sqrt() * (est.gamma - gamma_star),
    ]
}

pub fn gig_experiment(cfg: &GigExperimentConfig) -> Result<GigSummary> {
    cfg.bounds.validate()?;
    if cfg.reps == 0 || cfg.n_grid.is_empty() {
        return Err(Error::domain("experiment needs reps ≥ 1 and a non-empty n grid"));
    }
    let spec = gig_limit_spec(cfg.lambda_star, cfg.gamma_star)?;
    let limit = simulate_limit(&spec, cfg.limit_draws, derive_seed(cfg.seed, "gig/limit", 0))?;
    let limit_rows = limit.rows;
    let mut cells = Vec::with_capacity(cfg.n_grid.len());
    for &n in &cfg.n_grid {
        let tag = format!("gig/n{n}");
        let results: Vec<Result<Vec<f64>>> = (0..cfg.reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = rng_for(cfg.seed, &tag, r as u64);
                let data = sample_gamma_truth(cfg.lambda_star, cfg.gamma_star, n, &mut rng)?;
                let est = gig_mle(&data, &cfg.bounds, &MleOptions::default())?;
                Ok(scaled_estimate(&est, cfg.lambda_star, cfg.gamma_star, n))
            })
            .collect();
        let (ok, failures) = split_outcomes(results);
        let (reps, rows): (Vec<usize>, Vec<Vec<f64>>) = ok.into_iter().unzip();
        let mut ks = [0.0; 3];
        for (j, k) in ks.iter_mut().enumerate() {
            *k = ks_or_nan(&column(&rows, j), &column(&limit_rows, j));
        }
        let zero_fraction = zero_fraction(&column(&rows, 1));
        cells.push(GigCell {
            n,
            reps,
            rows,
            ks,
            zero_fraction,
            failures,
        });
    }
    let limit_zero_fraction = zero_fraction(&column(&limit_rows, 1));
    Ok(GigSummary {
        cells,
        limit_rows,
        limit_zero_fraction,
    })
}
