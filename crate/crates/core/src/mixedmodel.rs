//! Scalar linear mixed model y = xβ + z′b + ε with a 2×2 random-effect
//! covariance D: marginal likelihood, Bridge-penalised fits with exact zeros,
//! the matching limit field and the selection experiment.
//!
//! Parameters are ordered θ = (β, σ², D11, D12, D22).

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector3, Vector4};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::limitfield::{simulate_limit, GammaSource, LimitFieldSpec, LinearPenalty, PowerPenalty, PreMap};
use crate::linalg::{min_eigenvalue, min_quadratic_psd2, SymHalfVec};
use crate::localsets::{covariance_corner_set, LocalSet, Side};
use crate::opt::golden_min;
use crate::seed::{derive_seed, rng_for};
use crate::specfun::sample_normal;
use crate::stats::{column, ks_or_nan, RepFailure};

pub const PARAM_DIM: usize = 5;

#[derive(Clone, Debug)]
pub struct LmmData {
    y: Vec<f64>,
    x: Vec<f64>,
    z: Vec<[f64; 2]>,
}

impl LmmData {
    pub fn new(y: Vec<f64>, x: Vec<f64>, z: DMatrix<f64>) -> Result<Self> {
        let n = y.len();
        if n < 10 {
            return Err(Error::domain(format!("need at least 10 observations, got {n}")));
        }
        check_dim(n, x.len())?;
        check_dim(n, z.nrows())?;
        check_dim(2, z.ncols())?;
        let z: Vec<[f64; 2]> = (0..n).map(|i| [z[(i, 0)], z[(i, 1)]]).collect();
        let finite = y.iter().chain(&x).chain(z.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::domain("data must be finite"));
        }
        Ok(Self { y, x, z })
    }

    /// Draws n observations from the model at `theta` with covariates from `law`.
    pub fn simulate<R: Rng + ?Sized>(theta: &LmmTheta, law: &CovariateLaw, n: usize, rng: &mut R) -> Result<Self> {
        let l = theta.cholesky();
        let sd = theta.sigma2.sqrt();
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut z = DMatrix::zeros(n, 2);
        for i in 0..n {
            let (xi, zi) = law.draw(rng);
            let (g1, g2) = (sample_normal(rng), sample_normal(rng));
            let b = [l[0] * g1, l[1] * g1 + l[2] * g2];
            let eps = sd * sample_normal(rng);
            y.push(xi * theta.beta + zi[0] * b[0] + zi[1] * b[1] + eps);
            x.push(xi);
            z[(i, 0)] = zi[0];
            z[(i, 1)] = zi[1];
        }
        Self::new(y, x, z)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn z(&self) -> &[[f64; 2]] {
        &self.z
    }

    /// Per-observation rows (x, y, z1², 2z1z2, z2²).
    fn rows(&self) -> Vec<[f64; 5]> {
        self.x
            .iter()
            .zip(&self.y)
            .zip(&self.z)
            .map(|((&x, &y), z)| [x, y, z[0] * z[0], 2.0 * z[0] * z[1], z[1] * z[1]])
            .collect()
    }
}

/// Law of the covariates (X, Z1, Z2): independent centred normals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateLaw {
    pub x_sd: f64,
    pub z_sd: f64,
}

impl Default for CovariateLaw {
    fn default() -> Self {
        Self { x_sd: 1.0, z_sd: 1.0 }
    }
}

impl CovariateLaw {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, [f64; 2]) {
        let x = self.x_sd * sample_normal(rng);
        let z = [self.z_sd * sample_normal(rng), self.z_sd * sample_normal(rng)];
        (x, z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmmTheta {
    pub beta: f64,
    pub sigma2: f64,
    pub d: SymHalfVec,
}

impl LmmTheta {
    pub fn new(beta: f64, sigma2: f64, d11: f64, d12: f64, d22: f64) -> Result<Self> {
        let t = Self {
            beta,
            sigma2,
            d: SymHalfVec::new(2, vec![d11, d12, d22])?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d.order() != 2 {
            return Err(Error::domain("D must be 2×2"));
        }
        if !self.beta.is_finite() || !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(Error::domain("need finite β and σ² > 0"));
        }
        if min_eigenvalue(&self.d.to_matrix()) < -1e-12 {
            return Err(Error::domain("D is not positive semidefinite"));
        }
        Ok(())
    }

    pub fn d11(&self) -> f64 {
        self.d.entries()[0]
    }

    pub fn d12(&self) -> f64 {
        self.d.entries()[1]
    }

    pub fn d22(&self) -> f64 {
        self.d.entries()[2]
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.beta, self.sigma2, self.d11(), self.d12(), self.d22()]
    }

    fn phi(&self) -> [f64; 4] {
        [self.sigma2, self.d11(), self.d12(), self.d22()]
    }

    fn from_parts(beta: f64, phi: [f64; 4]) -> Self {
        Self {
            beta,
            sigma2: phi[0],
            d: SymHalfVec::new(2, vec![phi[1], phi[2], phi[3]]).expect("three entries"),
        }
    }

    /// Lower factor (l11, l21, l22) of D, tolerant of singular D.
    fn cholesky(&self) -> [f64; 3] {
        let l11 = self.d11().max(0.0).sqrt();
        let l21 = if l11 > 0.0 { self.d12() / l11 } else { 0.0 };
        let l22 = (self.d22() - l21 * l21).max(0.0).sqrt();
        [l11, l21, l22]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub q: f64,
    pub r: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::domain(format!("q = {} outside (0, 1]", self.q)));
        }
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::domain(format!("r = {} outside [0, 1]", self.r)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::domain("penalty weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Rate exponent of D22: r/q ∨ 1.
    pub fn rho(&self) -> f64 {
        (self.r / self.q).max(1.0)
    }

    fn weights(&self, n: usize) -> [f64; 2] {
        let s = (n as f64).powf(self.r / 2.0);
        [s * self.lambda1, s * self.lambda2]
    }
}

/// Compact parameter space: β and σ² intervals, D PSD with Frobenius norm
/// at most `d_radius`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmmBoxes {
    pub beta: (f64, f64),
    pub sigma2: (f64, f64),
    pub d_radius: f64,
}

impl Default for LmmBoxes {
    fn default() -> Self {
        Self {
            beta: (-10.0, 10.0),
            sigma2: (0.01, 10.0),
            d_radius: 10.0,
        }
    }
}

impl LmmBoxes {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta.0 < self.beta.1
            && self.sigma2.0 > 0.0
            && self.sigma2.0 < self.sigma2.1
            && self.d_radius > 0.0
            && self.sigma2.1.is_finite()
            && self.d_radius.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::domain("malformed parameter boxes"))
        }
    }

    pub fn contains(&self, t: &LmmTheta) -> bool {
        let [_, s2, d11, d12, d22] = t.to_array();
        in_range(t.beta, self.beta) && in_range(s2, self.sigma2) && self.d_ok(&[s2, d11, d12, d22])
    }

    fn d_ok(&self, phi: &[f64; 4]) -> bool {
        let [_, a, b, c] = *phi;
        let slack = 1e-12 * (a.abs() * c.abs() + b * b);
        a >= 0.0 && c >= 0.0 && a * c - b * b >= -slack && (a * a + 2.0 * b * b + c * c).sqrt() <= self.d_radius
    }
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    v >= lo && v <= hi
}

fn variance(phi: &[f64; 4], o: &[f64; 5]) -> f64 {
    phi[0] + phi[1] * o[2] + phi[2] * o[3] + phi[3] * o[4]
}

fn loglik_value(rows: &[[f64; 5]], beta: f64, phi: &[f64; 4]) -> f64 {
    let mut s = 0.0;
    for o in rows {
        let v = variance(phi, o);
        if !(v > 0.0) {
            return f64::NEG_INFINITY;
        }
        let e = o[1] - o[0] * beta;
        s += e * e / v + v.ln();
    }
    -0.5 * s
}

struct Derivs {
    value: f64,
    grad: [f64; 5],
    hess: [[f64; 5]; 5],
    /// Σ ½ dv dv′ / v² over the variance block
    fisher: [[f64; 4]; 4],
}

fn loglik_derivs(rows: &[[f64; 5]], beta: f64, phi: &[f64; 4]) -> Result<Derivs> {
    let mut d = Derivs {
        value: 0.0,
        grad: [0.0; 5],
        hess: [[0.0; 5]; 5],
        fisher: [[0.0; 4]; 4],
    };
    for o in rows {
        let v = variance(phi, o);
        if !(v > 0.0) {
            return Err(Error::domain("marginal variance is not positive"));
        }
        let e = o[1] - o[0] * beta;
        let (iv, e2) = (1.0 / v, e * e);
        let dv = [1.0, o[2], o[3], o[4]];
        d.value -= 0.5 * (e2 * iv + v.ln());
        d.grad[0] += o[0] * e * iv;
        let gv = 0.5 * (e2 * iv * iv - iv);
        let hv = 0.5 * iv * iv - e2 * iv * iv * iv;
        let hb = -o[0] * e * iv * iv;
        d.hess[0][0] -= o[0] * o[0] * iv;
        for a in 0..4 {
            d.grad[a + 1] += gv * dv[a];
            d.hess[0][a + 1] += hb * dv[a];
            for b in a..4 {
                d.hess[a + 1][b + 1] += hv * dv[a] * dv[b];
                d.fisher[a][b] += 0.5 * iv * iv * dv[a] * dv[b];
            }
        }
    }
    for a in 0..5 {
        for b in 0..a {
            d.hess[a][b] = d.hess[b][a];
        }
    }
    for a in 0..4 {
        for b in 0..a {
            d.fisher[a][b] = d.fisher[b][a];
        }
    }
    Ok(d)
}

/// −½Σ[(y_i − x_iβ)²/v_i + log v_i] with v_i = z_i′Dz_i + σ².
pub fn marginal_loglik(data: &LmmData, theta: &LmmTheta) -> Result<f64> {
    theta.validate()?;
    Ok(loglik_value(&data.rows(), theta.beta, &theta.phi()))
}

/// Gradient of the marginal log-likelihood in θ order. Valid wherever all
/// v_i > 0, including just outside the PSD cone.
pub fn marginal_score(data: &LmmData, theta: &[f64; 5]) -> Result<[f64; 5]> {
    let phi = [theta[1], theta[2], theta[3], theta[4]];
    Ok(loglik_derivs(&data.rows(), theta[0], &phi)?.grad)
}

pub fn marginal_hessian(data: &LmmData, theta: &[f64; 5]) -> Result<DMatrix<f64>> {
    let phi = [theta[1], theta[2], theta[3], theta[4]];
    let h = loglik_derivs(&data.rows(), theta[0], &phi)?.hess;
    Ok(DMatrix::from_fn(5, 5, |i, j| h[i][j]))
}

/// Marginal log-likelihood minus n^{r/2}(λ1|D11|^q + λ2|D22|^q).
pub fn penalized_objective(data: &LmmData, theta: &LmmTheta, pen: &PenaltyConfig) -> Result<f64> {
    pen.validate()?;
    let w = pen.weights(data.len());
    Ok(marginal_loglik(data, theta)? - penalty_value(w, pen.q, &theta.phi()))
}

fn penalty_value(w: [f64; 2], q: f64, phi: &[f64; 4]) -> f64 {
    let mut p = 0.0;
    if w[0] > 0.0 {
        p += w[0] * phi[1].abs().powf(q);
    }
    if w[1] > 0.0 {
        p += w[1] * phi[3].abs().powf(q);
    }
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub max_sweeps: usize,
    pub tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_sweeps: 500,
            tol: 1e-12,
        }
    }
}

struct Problem<'a> {
    rows: &'a [[f64; 5]],
    w: [f64; 2],
    q: f64,
    boxes: &'a LmmBoxes,
}

impl Problem<'_> {
    fn n(&self) -> f64 {
        self.rows.len() as f64
    }

    fn objective(&self, beta: f64, phi: &[f64; 4]) -> f64 {
        if !in_range(beta, self.boxes.beta) || !in_range(phi[0], self.boxes.sigma2) || !self.boxes.d_ok(phi) {
            return f64::NEG_INFINITY;
        }
        loglik_value(self.rows, beta, phi) - penalty_value(self.w, self.q, phi)
    }

    /// Exact β update: weighted least squares, clipped to its interval.
    fn beta_step(&self, phi: &[f64; 4]) -> f64 {
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for o in self.rows {
            let iv = 1.0 / variance(phi, o);
            sxx += o[0] * o[0] * iv;
            sxy += o[0] * o[1] * iv;
        }
        let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        b.clamp(self.boxes.beta.0, self.boxes.beta.1)
    }

    fn pen_grad(&self, k: usize, v: f64) -> f64 {
        let w = self.w[k];
        if w == 0.0 {
            0.0
        } else {
            w * self.q * v.powf(self.q - 1.0)
        }
    }

    /// Backtracking ascent from `phi` towards `target`; returns the accepted point.
    fn line_search(
        &self,
        beta: f64,
        phi: &[f64; 4],
        f0: f64,
        target: &[f64; 4],
        slope: f64,
    ) -> Option<([f64; 4], f64)> {
        let mut t = 1.0;
        for _ in 0..60 {
            let cand: [f64; 4] = std::array::from_fn(|i| phi[i] + t * (target[i] - phi[i]));
            let f = self.objective(beta, &cand);
            if f >= f0 + 1e-4 * t * slope && f > f0 {
                return Some((cand, f));
            }
            t *= 0.5;
        }
        None
    }

    /// Sequential quadratic ascent over (σ², D) with D inside the PSD cone.
    /// Stops when an iterate reaches D11 = 0 or D22 = 0, where the penalty
    /// stops being differentiable; those faces have their own solvers.
    fn sqp(&self, beta: f64, start: [f64; 4]) -> Result<([f64; 4], f64)> {
        let mut phi = start;
        let mut f = self.objective(beta, &phi);
        if !f.is_finite() {
            return Ok((phi, f));
        }
        for _ in 0..200 {
            if phi[1] <= 0.0 || phi[3] <= 0.0 {
                break;
            }
            let d = loglik_derivs(self.rows, beta, &phi)?;
            let g = Vector4::new(
                d.grad[1],
                d.grad[2] - self.pen_grad(0, phi[1]),
                d.grad[3],
                d.grad[4] - self.pen_grad(1, phi[3]),
            );
            let neg_h = Matrix4::from_fn(|i, j| -d.hess[i + 1][j + 1]);
            let q = if neg_h.cholesky().is_some() {
                neg_h
            } else {
                Matrix4::from_fn(|i, j| d.fisher[i][j])
            };
            let Some(target) = self.qp_step(&q, &g, &phi) else {
                break;
            };
            let slope: f64 = (0..4).map(|i| g[i] * (target[i] - phi[i])).sum();
            if !(slope > 1e-14 * (1.0 + f.abs())) {
                break;
            }
            let Some((next, fn_)) = self.line_search(beta, &phi, f, &target, slope) else {
                break;
            };
            let step: f64 = (0..4).map(|i| (next[i] - phi[i]).powi(2)).sum::<f64>().sqrt();
            let gain = fn_ - f;
            phi = next;
            f = fn_;
            if gain <= 1e-14 * (1.0 + f.abs()) || step <= 1e-13 {
                break;
            }
        }
        Ok((phi, f))
    }

    /// argmin of ½s′Qs − g′s with σ² + s0 in its interval and D + s_D PSD.
    fn qp_step(&self, q: &Matrix4<f64>, g: &Vector4<f64>, phi: &[f64; 4]) -> Option<[f64; 4]> {
        let chol = q.cholesky()?;
        let s = chol.solve(g);
        let free: [f64; 4] = std::array::from_fn(|i| phi[i] + s[i]);
        let (lo, hi) = self.boxes.sigma2;
        let psd = |p: &[f64; 4]| p[1] >= 0.0 && p[3] >= 0.0 && p[1] * p[3] >= p[2] * p[2];
        if in_range(free[0], (lo, hi)) && psd(&free) {
            return Some(free);
        }
        let qdd = Matrix3::from_fn(|i, j| q[(i + 1, j + 1)]);
        let qdd_inv = qdd.cholesky()?.inverse();
        let qd0 = Vector3::new(q[(1, 0)], q[(2, 0)], q[(3, 0)]);
        let gd = Vector3::new(g[1], g[2], g[3]);
        let dcur = Vector3::new(phi[1], phi[2], phi[3]);
        let qarr: [[f64; 3]; 3] = std::array::from_fn(|i| std::array::from_fn(|j| qdd[(i, j)]));
        let inner = |t: f64| -> (f64, Vector3<f64>) {
            let s0 = t - phi[0];
            let rhs = gd - qd0 * s0;
            let c = dcur + qdd_inv * rhs;
            let dnew = Vector3::from(min_quadratic_psd2(&qarr, [c[0], c[1], c[2]]));
            let sd = dnew - dcur;
            let cost = 0.5 * q[(0, 0)] * s0 * s0 - g[0] * s0 + 0.5 * sd.dot(&(qdd * sd)) - sd.dot(&rhs);
            (cost, dnew)
        };
        let t = golden_min(|t| inner(t).0, lo, hi, 200);
        let mut best = (inner(t).0, t);
        for e in [lo, hi] {
            let c = inner(e).0;
            if c < best.0 {
                best = (c, e);
            }
        }
        let dnew = inner(best.1).1;
        Some([best.1, dnew[0], dnew[1], dnew[2]])
    }

    /// Ascent over (σ², D11) on the face D12 = D22 = 0.
    fn face(&self, beta: f64, start: [f64; 2]) -> Result<([f64; 4], f64)> {
        let mut phi = [start[0], start[1], 0.0, 0.0];
        let mut f = self.objective(beta, &phi);
        if !f.is_finite() {
            return Ok((phi, f));
        }
        let (lo, hi) = self.boxes.sigma2;
        for _ in 0..200 {
            if phi[1] <= 0.0 {
                break;
            }
            let d = loglik_derivs(self.rows, beta, &phi)?;
            let g = [d.grad[1], d.grad[2] - self.pen_grad(0, phi[1])];
            let neg_h = [[-d.hess[1][1], -d.hess[1][2]], [-d.hess[2][1], -d.hess[2][2]]];
            let det = neg_h[0][0] * neg_h[1][1] - neg_h[0][1] * neg_h[1][0];
            let q = if neg_h[0][0] > 0.0 && det > 0.0 {
                neg_h
            } else {
                [[d.fisher[0][0], d.fisher[0][1]], [d.fisher[1][0], d.fisher[1][1]]]
            };
            let s = box_qp2(
                &q,
                &g,
                [lo - phi[0], -phi[1]],
                [hi - phi[0], self.boxes.d_radius - phi[1]],
            );
            let target = [phi[0] + s[0], phi[1] + s[1], 0.0, 0.0];
            let slope = g[0] * s[0] + g[1] * s[1];
            if !(slope > 1e-14 * (1.0 + f.abs())) {
                break;
            }
            let Some((next, fn_)) = self.line_search(beta, &phi, f, &target, slope) else {
                break;
            };
            let gain = fn_ - f;
            phi = next;
            f = fn_;
            if gain <= 1e-14 * (1.0 + f.abs()) {
                break;
            }
        }
        Ok((phi, f))
    }

    /// D = 0: σ² has a closed form.
    fn zero_face(&self, beta: f64) -> ([f64; 4], f64) {
        let s: f64 = self.rows.iter().map(|o| (o[1] - o[0] * beta).powi(2)).sum::<f64>() / self.n();
        let phi = [s.clamp(self.boxes.sigma2.0, self.boxes.sigma2.1), 0.0, 0.0, 0.0];
        (phi, self.objective(beta, &phi))
    }

    /// Best point on the rank-one curve D22 = D12²/D11 through a face point,
    /// scanned over D12 on an n^{-1/2} grid.
    fn rank_one_probe(&self, beta: f64, face: &[f64; 4]) -> Option<([f64; 4], f64)> {
        if face[1] <= 0.0 {
            return None;
        }
        let scale = self.n().sqrt().recip();
        let mut best: Option<([f64; 4], f64)> = None;
        for k in [0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            for sign in [-1.0, 1.0] {
                let b = sign * k * scale;
                let phi = [face[0], face[1], b, b * b / face[1]];
                let f = self.objective(beta, &phi);
                if best.is_none_or(|(_, fb)| f > fb) {
                    best = Some((phi, f));
                }
            }
        }
        best
    }
}

/// argmin of ½s′Qs − g′s over lo ≤ s ≤ hi in two dimensions by enumerating
/// active sets.
fn box_qp2(q: &[[f64; 2]; 2], g: &[f64; 2], lo: [f64; 2], hi: [f64; 2]) -> [f64; 2] {
    let cost = |s: [f64; 2]| {
        0.5 * (q[0][0] * s[0] * s[0] + 2.0 * q[0][1] * s[0] * s[1] + q[1][1] * s[1] * s[1]) - g[0] * s[0] - g[1] * s[1]
    };
    let mut best = ([0.0f64.clamp(lo[0], hi[0]), 0.0f64.clamp(lo[1], hi[1])], f64::INFINITY);
    let mut consider = |s: [f64; 2]| {
        if s.iter().all(|v| v.is_finite()) && s[0] >= lo[0] && s[0] <= hi[0] && s[1] >= lo[1] && s[1] <= hi[1] {
            let c = cost(s);
            if c < best.1 {
                best = (s, c);
            }
        }
    };
    let det = q[0][0] * q[1][1] - q[0][1] * q[1][0];
    consider([
        (q[1][1] * g[0] - q[0][1] * g[1]) / det,
        (q[0][0] * g[1] - q[1][0] * g[0]) / det,
    ]);
    for s1 in [lo[1], hi[1]] {
        consider([((g[0] - q[0][1] * s1) / q[0][0]).clamp(lo[0], hi[0]), s1]);
    }
    for s0 in [lo[0], hi[0]] {
        consider([s0, ((g[1] - q[1][0] * s0) / q[1][1]).clamp(lo[1], hi[1])]);
    }
    best.0
}

/// Penalised marginal likelihood fit over the boxes and the PSD cone.
///
/// Alternates an exact β update with a (σ², D) update that keeps the best of
/// the current point, sequential quadratic ascent inside the cone, the face
/// D12 = D22 = 0, the point D = 0 and probes along the rank-one boundary.
/// Zeros on the faces are exact.
pub fn pqmle_fit(data: &LmmData, pen: &PenaltyConfig, boxes: &LmmBoxes, opts: &FitOptions) -> Result<LmmTheta> {
    pen.validate()?;
    boxes.validate()?;
    let rows = data.rows();
    let prob = Problem {
        rows: &rows,
        w: pen.weights(rows.len()),
        q: pen.q,
        boxes,
    };
    let n = prob.n();
    let (sxx, sxy) = rows
        .iter()
        .fold((0.0, 0.0), |(a, b), o| (a + o[0] * o[0], b + o[0] * o[1]));
    let mut beta = if sxx > 0.0 { sxy / sxx } else { 0.0 }.clamp(boxes.beta.0, boxes.beta.1);
    let s2: f64 = rows.iter().map(|o| (o[1] - o[0] * beta).powi(2)).sum::<f64>() / n;
    let mut phi = [
        (0.5 * s2).clamp(boxes.sigma2.0, boxes.sigma2.1),
        (0.25 * s2).min(0.5 * boxes.d_radius),
        0.0,
        (0.25 * s2).min(0.5 * boxes.d_radius),
    ];
    let mut f = prob.objective(beta, &phi);
    if !f.is_finite() {
        return Err(Error::domain("starting point has an infinite objective"));
    }
    for _ in 0..opts.max_sweeps {
        let f_start = f;
        beta = prob.beta_step(&phi);
        let fb = prob.objective(beta, &phi);
        if fb >= f {
            f = fb;
        }
        let mut best = (phi, f);
        let mut offer = |cand: ([f64; 4], f64)| {
            if cand.1 > best.1 {
                best = cand;
            }
        };
        if phi[1] > 0.0 && phi[3] > 0.0 {
            offer(prob.sqp(beta, phi)?);
        }
        let face_start = if phi[1] > 0.0 {
            [phi[0], phi[1]]
        } else {
            [phi[0], 0.5 * phi[0]]
        };
        let face = prob.face(beta, face_start)?;
        offer(face);
        offer(prob.zero_face(beta));
        if let Some((p, _)) = prob.rank_one_probe(beta, &face.0) {
            offer(prob.sqp(beta, p)?);
        }
        if face.0[1] > 0.0 {
            offer(prob.sqp(beta, [face.0[0], face.0[1], 0.0, n.sqrt().recip()])?);
        }
        phi = best.0;
        if phi[3] == 0.0 {
            phi[2] = 0.0;
        }
        f = prob.objective(beta, &phi);
        if f < f_start - 1e-9 * (1.0 + f_start.abs()) {
            return Err(Error::NonConvergence {
                what: "penalised mixed-model fit",
                detail: format!("sweep decreased the objective from {f_start} to {f}"),
                candidates: vec![vec![beta, phi[0], phi[1], phi[2], phi[3]]],
            });
        }
        if f - f_start <= opts.tol * (1.0 + f_start.abs()) {
            return Ok(LmmTheta::from_parts(beta, phi));
        }
    }
    Err(Error::NonConvergence {
        what: "penalised mixed-model fit",
        detail: format!("no convergence after {} sweeps", opts.max_sweeps),
        candidates: vec![vec![beta, phi[0], phi[1], phi[2], phi[3]]],
    })
}

/// Monte Carlo estimate of Γ(θ*) = −E[∂²ℓ_i(θ*)].
#[derive(Clone, Debug)]
pub struct LmmGamma {
    pub gamma: DMatrix<f64>,
    /// Entrywise Monte Carlo standard errors.
    pub std_err: DMatrix<f64>,
    /// Largest entrywise gap between Γ and central differences of the
    /// averaged score on the same draws.
    pub fd_gap: f64,
}

pub fn lmm_gamma<R: Rng + ?Sized>(
    theta_star: &LmmTheta,
    law: &CovariateLaw,
    n_mc: usize,
    rng: &mut R,
) -> Result<LmmGamma> {
    theta_star.validate()?;
    if n_mc < 10 {
        return Err(Error::domain("n_mc must be at least 10"));
    }
    let data = LmmData::simulate(theta_star, law, n_mc, rng)?;
    let rows = data.rows();
    let t = theta_star.to_array();
    let phi = theta_star.phi();
    let m = n_mc as f64;
    let mut sum = DMatrix::<f64>::zeros(5, 5);
    let mut sum_sq = DMatrix::<f64>::zeros(5, 5);
    for o in &rows {
        let h = loglik_derivs(std::slice::from_ref(o), t[0], &phi)?.hess;
        for i in 0..5 {
            for j in 0..5 {
                sum[(i, j)] -= h[i][j];
                sum_sq[(i, j)] += h[i][j] * h[i][j];
            }
        }
    }
    let gamma = &sum / m;
    let std_err = DMatrix::from_fn(5, 5, |i, j| {
        let var = (sum_sq[(i, j)] / m - gamma[(i, j)].powi(2)).max(0.0);
        (var / (m - 1.0)).sqrt()
    });
    let gamma = (&gamma + gamma.transpose()) * 0.5;

    let h = 1e-5;
    let mut fd_gap: f64 = 0.0;
    for k in 0..5 {
        let mut tp = t;
        let mut tm = t;
        tp[k] += h;
        tm[k] -= h;
        let gp = loglik_derivs(&rows, tp[0], &[tp[1], tp[2], tp[3], tp[4]])?.grad;
        let gm = loglik_derivs(&rows, tm[0], &[tm[1], tm[2], tm[3], tm[4]])?.grad;
        for i in 0..5 {
            let fd = -(gp[i] - gm[i]) / (2.0 * h * m);
            fd_gap = fd_gap.max((fd - gamma[(i, k)]).abs());
        }
    }
    let min_eig = min_eigenvalue(&gamma);
    if !(min_eig > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "mixed-model Γ has minimum eigenvalue {min_eig:e}"
        )));
    }
    Ok(LmmGamma { gamma, std_err, fd_gap })
}

/// Limit field for the truth pattern D* = diag(D11*, 0): linear penalty
/// 1{r=1}λ1 q D11*^{q−1} on D11, power penalty λ2 1{q≤r}|u|^q on D22, D22
/// masked from the quadratic when q < r, domain R² × W.
pub fn lmm_limit_spec(theta_star: &LmmTheta, pen: &PenaltyConfig, gamma: &DMatrix<f64>) -> Result<LimitFieldSpec> {
    pen.validate()?;
    theta_star.validate()?;
    let d11 = theta_star.d11();
    if !(d11 > 0.0) || theta_star.d12() != 0.0 || theta_star.d22() != 0.0 {
        return Err(Error::domain("limit field needs D11* > 0 and D12* = D22* = 0"));
    }
    if gamma.nrows() != PARAM_DIM || gamma.ncols() != PARAM_DIM {
        return Err(Error::Dimension {
            expected: PARAM_DIM,
            got: gamma.nrows(),
        });
    }
    let mut linear = Vec::new();
    if pen.r == 1.0 && pen.lambda1 > 0.0 {
        linear.push(LinearPenalty {
            index: 2,
            coef: pen.lambda1 * pen.q * d11.powf(pen.q - 1.0),
        });
    }
    let mut power = Vec::new();
    if pen.q <= pen.r && pen.lambda2 > 0.0 {
        power.push(PowerPenalty {
            index: 4,
            coef: pen.lambda2,
            exponent: pen.q,
        });
    }
    let pre_map = if pen.q < pen.r {
        PreMap::Mask(vec![true, true, true, true, false])
    } else {
        PreMap::Identity
    };
    let domain = LocalSet::product(vec![
        LocalSet::box_cone(vec![Side::Free, Side::Free]),
        covariance_corner_set(d11, pen.q, pen.r)?,
    ]);
    LimitFieldSpec::new(
        PARAM_DIM,
        pre_map,
        GammaSource::Fixed(gamma.clone()),
        linear,
        power,
        domain,
    )
}

/// a_n^{-1}(θ̂ − θ*) with a_n = diag(n^{-1/2} ×4, n^{-ρ/2}).
pub fn scaled_estimate(est: &LmmTheta, truth: &LmmTheta, pen: &PenaltyConfig, n: usize) -> Vec<f64> {
    let rn = (n as f64).sqrt();
    let e = est.to_array();
    let t = truth.to_array();
    let mut out: Vec<f64> = (0..4).map(|i| rn * (e[i] - t[i])).collect();
    out.push((n as f64).powf(pen.rho() / 2.0) * (e[4] - t[4]));
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmmTruth {
    pub beta: f64,
    pub sigma2: f64,
    pub d11: f64,
}

impl Default for LmmTruth {
    fn default() -> Self {
        Self {
            beta: 1.0,
            sigma2: 1.0,
            d11: 1.0,
        }
    }
}

impl LmmTruth {
    pub fn theta(&self) -> Result<LmmTheta> {
        LmmTheta::new(self.beta, self.sigma2, self.d11, 0.0, 0.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyGrid {
    pub q_grid: Vec<f64>,
    pub r_grid: Vec<f64>,
    #[serde(default = "one")]
    pub lambda1: f64,
    #[serde(default = "one")]
    pub lambda2: f64,
}

fn one() -> f64 {
    1.0
}

fn default_gamma_mc() -> usize {
    200_000
}

fn default_lmm_limit_draws() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    #[serde(default)]
    pub truth: LmmTruth,
    pub penalty: PenaltyGrid,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    #[serde(default)]
    pub covariates: CovariateLaw,
    #[serde(default)]
    pub boxes: LmmBoxes,
    #[serde(default = "default_gamma_mc")]
    pub gamma_mc: usize,
    #[serde(default = "default_lmm_limit_draws")]
    pub limit_draws: usize,
}

impl SelectionConfig {
    /// The (q, r) pairs in grid order, q outer.
    pub fn penalties(&self) -> Vec<PenaltyConfig> {
        let p = &self.penalty;
        p.q_grid
            .iter()
            .flat_map(|&q| {
                p.r_grid.iter().map(move |&r| PenaltyConfig {
                    q,
                    r,
                    lambda1: p.lambda1,
                    lambda2: p.lambda2,
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionCell {
    pub q: f64,
    pub r: f64,
    pub n: usize,
    /// replication index of each successful fit
    pub reps: Vec<usize>,
    pub zero_freq_d22: f64,
    pub zero_freq_joint: f64,
    /// replications with D̂22 = 0 but D̂12 ≠ 0
    pub joint_violations: usize,
    /// scaled estimates a_n^{-1}(θ̂ − θ*), one row per replication
    pub rows: Vec<Vec<f64>>,
    pub ks: Vec<f64>,
    pub failures: Vec<RepFailure>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionLimit {
    pub q: f64,
    pub r: f64,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SelectionSummary {
    pub cells: Vec<SelectionCell>,
    pub limits: Vec<SelectionLimit>,
    pub gamma: LmmGamma,
}

/// Exact-zero frequencies of D̂22 over (q, r, n). Every (q, r) pair is fitted
/// to the same simulated data sets, so cells at a given n are paired.
pub fn selection_experiment(cfg: &SelectionConfig) -> Result<SelectionSummary> {
    if cfg.reps == 0 || cfg.n_grid.is_empty() {
        return Err(Error::domain("experiment needs reps ≥ 1 and a non-empty n grid"));
    }
    let pens = cfg.penalties();
    if pens.is_empty() {
        return Err(Error::domain("empty penalty grid"));
    }
    for p in &pens {
        p.validate()?;
    }
    cfg.boxes.validate()?;
    let truth = cfg.truth.theta()?;
    let gamma = lmm_gamma(
        &truth,
        &cfg.covariates,
        cfg.gamma_mc,
        &mut rng_for(cfg.seed, "lmm/gamma", 0),
    )?;
    let limits = pens
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let spec = lmm_limit_spec(&truth, p, &gamma.gamma)?;
            let s = simulate_limit(&spec, cfg.limit_draws, derive_seed(cfg.seed, "lmm/limit", i as u64))?;
            Ok(SelectionLimit {
                q: p.q,
                r: p.r,
                rows: s.rows,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = FitOptions::default();
    let mut cells = Vec::new();
    for &n in &cfg.n_grid {
        let tag = format!("lmm/n{n}");
        let fits: Vec<Vec<std::result::Result<LmmTheta, String>>> = (0..cfg.reps)
            .into_par_iter()
            .map(|rep| {
                let mut rng = rng_for(cfg.seed, &tag, rep as u64);
                match LmmData::simulate(&truth, &cfg.covariates, n, &mut rng) {
                    Ok(data) => pens
                        .iter()
                        .map(|p| pqmle_fit(&data, p, &cfg.boxes, &opts).map_err(|e| e.to_string()))
                        .collect(),
                    Err(e) => vec![Err(e.to_string()); pens.len()],
                }
            })
            .collect();
        for (i, p) in pens.iter().enumerate() {
            let mut reps = Vec::new();
            let mut est = Vec::new();
            let mut failures = Vec::new();
            for (rep, f) in fits.iter().enumerate() {
                match &f[i] {
                    Ok(t) => {
                        reps.push(rep);
                        est.push(t);
                    }
                    Err(m) => failures.push(RepFailure {
                        rep,
                        message: m.clone(),
                    }),
                }
            }
            let cnt = est.len() as f64;
            let z22 = est.iter().filter(|t| t.d22() == 0.0).count();
            let joint = est.iter().filter(|t| t.d22() == 0.0 && t.d12() == 0.0).count();
            let rows: Vec<Vec<f64>> = est.iter().map(|t| scaled_estimate(t, &truth, p, n)).collect();
            let ks = (0..PARAM_DIM)
                .map(|j| ks_or_nan(&column(&rows, j), &column(&limits[i].rows, j)))
                .collect();
            cells.push(SelectionCell {
                q: p.q,
                r: p.r,
                n,
                reps,
                zero_freq_d22: z22 as f64 / cnt,
                zero_freq_joint: joint as f64 / cnt,
                joint_violations: z22 - joint,
                rows,
                ks,
                failures,
            });
        }
    }
    Ok(SelectionSummary { cells, limits, gamma })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize, seed: u64) -> (LmmTheta, LmmData) {
        let truth = LmmTheta::new(1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let d = LmmData::simulate(&truth, &CovariateLaw::default(), n, &mut rng_for(seed, "t", 0)).unwrap();
        (truth, d)
    }

    #[test]
    fn trivial_likelihood_values() {
        let z = DMatrix::from_fn(10, 2, |_, j| if j == 0 { 1.0 } else { 0.0 });
        let d = LmmData::new(vec![0.0; 10], vec![1.0; 10], z.clone()).unwrap();
        let t = LmmTheta::new(0.0, 1.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(marginal_loglik(&d, &t).unwrap(), 0.0);
        let t = LmmTheta::new(0.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let expect = -0.5 * 10.0 * 2f64.ln();
        assert!((marginal_loglik(&d, &t).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn score_matches_central_differences() {
        let (_, d) = data(200, 1);
        let t = [0.7, 1.3, 0.8, 0.2, 0.5];
        let g = marginal_score(&d, &t).unwrap();
        let rows = d.rows();
        let f = |t: &[f64; 5]| loglik_value(&rows, t[0], &[t[1], t[2], t[3], t[4]]);
        for k in 0..5 {
            let h = 1e-6;
            let (mut a, mut b) = (t, t);
            a[k] += h;
            b[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - g[k]).abs() <= 1e-6 * (1.0 + g[k].abs()), "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn huge_penalty_zeroes_d() {
        let (_, d) = data(300, 2);
        let pen = PenaltyConfig {
            q: 0.5,
            r: 1.0,
            lambda1: 1e6,
            lambda2: 1e6,
        };
        let fit = pqmle_fit(&d, &pen, &LmmBoxes::default(), &FitOptions::default()).unwrap();
        assert_eq!(fit.d.entries(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fit_respects_constraints_and_zero_bookkeeping() {
        for seed in 0..6 {
            let (_, d) = data(500, 10 + seed);
            for q in [0.4, 1.0] {
                let pen = PenaltyConfig {
                    q,
                    r: 1.0,
                    lambda1: 1.0,
                    lambda2: 1.0,
                };
                let boxes = LmmBoxes::default();
                let fit = pqmle_fit(&d, &pen, &boxes, &FitOptions::default()).unwrap();
                assert!(boxes.contains(&fit));
                if fit.d22() == 0.0 {
                    assert_eq!(fit.d12(), 0.0);
                }
            }
        }
    }

    #[test]
    fn gamma_is_positive_definite_and_matches_differences() {
        let truth = LmmTheta::new(1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let g = lmm_gamma(&truth, &CovariateLaw::default(), 20_000, &mut rng_for(4, "g", 0)).unwrap();
        assert!(g.fd_gap < 5e-3, "{}", g.fd_gap);
        assert!(min_eigenvalue(&g.gamma) > 0.0);
        assert!(g.gamma[(0, 1)].abs() < 4.0 * g.std_err[(0, 1)] + 1e-3);
    }

    #[test]
    fn limit_spec_shapes() {
        let truth = LmmTheta::new(1.0, 1.0, 1.0, 0.0, 0.0).unwrap();
        let gamma = DMatrix::identity(5, 5);
        let pen = |q| PenaltyConfig {
            q,
            r: 1.0,
            lambda1: 1.0,
            lambda2: 1.0,
        };
        let s = lmm_limit_spec(&truth, &pen(1.0), &gamma).unwrap();
        assert_eq!(s.pre_map(), &PreMap::Identity);
        assert_eq!(s.linear_penalties()[0].coef, 1.0);
        let s = lmm_limit_spec(&truth, &pen(0.4), &gamma).unwrap();
        assert_eq!(s.pre_map(), &PreMap::Mask(vec![true, true, true, true, false]));
        assert!(s.domain().contains(&[0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        assert!(!s.domain().contains(&[0.0, 0.0, 0.0, 0.1, 1.0]).unwrap());
        let s = lmm_limit_spec(&truth, &pen(0.5), &gamma).unwrap();
        assert!(s.domain().contains(&[0.0, 0.0, 0.0, 1.0, 1.0]).unwrap());
        assert!(!s.domain().contains(&[0.0, 0.0, 0.0, 1.0, 0.5]).unwrap());
        let bad = LmmTheta::new(1.0, 1.0, 1.0, 0.0, 0.5).unwrap();
        assert!(lmm_limit_spec(&bad, &pen(1.0), &gamma).is_err());
    }
}
