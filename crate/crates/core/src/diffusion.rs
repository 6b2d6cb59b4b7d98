//! Small-diffusion model dX = τ dt + f(X) a dW observed on [0, T]: Euler
//! simulation, Gaussian quasi-likelihood in A = aa′, the PSD-constrained
//! QMLE, its information matrix, and the pairing of the scaled estimator
//! with the argmax of its quadratic approximation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::limitfield::{
    argmax, simulate_limit, ArgmaxOptions, FieldDraw, GammaGenerator, GammaSource, LimitFieldSpec, PreMap,
};
use crate::linalg::{max_eigenvalue, min_eigenvalue, min_quadratic_psd2, sym_eigen, sym_matrix_from_half, SymHalfVec};
use crate::localsets::{LocalSet, ThetaSpace};
use crate::seed::{derive_seed, rng_for, SimRng};
use crate::specfun::sample_normal;
use crate::stats::{column, ks_or_nan, median, split_outcomes, RepFailure};

const SINGULAR_TOL: f64 = 1e-12;

/// The state-dependent factor f(x) of the diffusion coefficient f(x)a.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientMap {
    /// f(x) = I_m, d = m
    Identity { order: usize },
    /// f(x) = √(1 + |x|²) I_m, d = m
    Scaled { order: usize },
    /// scalar state, f(x) = (1, x, …, x^(m−1)), d = 1
    Polynomial { order: usize },
}

impl CoefficientMap {
    pub fn order(&self) -> usize {
        match *self {
            CoefficientMap::Identity { order }
            | CoefficientMap::Scaled { order }
            | CoefficientMap::Polynomial { order } => order,
        }
    }

    pub fn state_dim(&self) -> usize {
        match *self {
            CoefficientMap::Identity { order } | CoefficientMap::Scaled { order } => order,
            CoefficientMap::Polynomial { .. } => 1,
        }
    }

    /// f(x) as a d×m matrix.
    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        match *self {
            CoefficientMap::Identity { order } => DMatrix::identity(order, order),
            CoefficientMap::Scaled { order } => {
                let s = (1.0 + x.iter().map(|v| v * v).sum::<f64>()).sqrt();
                DMatrix::identity(order, order) * s
            }
            CoefficientMap::Polynomial { order } => DMatrix::from_fn(1, order, |_, j| x[0].powi(j as i32)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionModel {
    coef: CoefficientMap,
    drift: Vec<f64>,
    a_star: DMatrix<f64>,
    sqrt_a: DMatrix<f64>,
    horizon: f64,
    radius: f64,
    x0: Vec<f64>,
}

impl DiffusionModel {
    pub fn new(
        coef: CoefficientMap,
        drift: Vec<f64>,
        a_star: DMatrix<f64>,
        horizon: f64,
        radius: f64,
        x0: Vec<f64>,
    ) -> Result<Self> {
        let m = coef.order();
        let d = coef.state_dim();
        if m == 0 {
            return Err(Error::domain("coefficient order must be positive"));
        }
        check_dim(d, drift.len())?;
        check_dim(d, x0.len())?;
        if a_star.nrows() != m || a_star.ncols() != m {
            return Err(Error::Dimension {
                expected: m * m,
                got: a_star.len(),
            });
        }
        if (&a_star - a_star.transpose()).amax() > 1e-12 {
            return Err(Error::domain("A* must be symmetric"));
        }
        if min_eigenvalue(&a_star) < -1e-12 {
            return Err(Error::domain("A* must be positive semidefinite"));
        }
        if !(horizon > 0.0) || !(radius > 0.0) {
            return Err(Error::domain("horizon and radius must be positive"));
        }
        if !(a_star.norm() < radius) {
            return Err(Error::domain("A* must lie strictly inside the norm ball"));
        }
        let (vals, vecs) = sym_eigen(&a_star);
        let root = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0).sqrt()));
        let sqrt_a = &vecs * root * vecs.transpose();
        Ok(Self {
            coef,
            drift,
            a_star,
            sqrt_a,
            horizon,
            radius,
            x0,
        })
    }

    pub fn coef(&self) -> CoefficientMap {
        self.coef
    }

    pub fn a_star(&self) -> &DMatrix<f64> {
        &self.a_star
    }

    pub fn theta_star(&self) -> SymHalfVec {
        SymHalfVec::from_matrix(&self.a_star).expect("square")
    }

    pub fn param_dim(&self) -> usize {
        SymHalfVec::len_for(self.coef.order())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn space(&self) -> ThetaSpace {
        ThetaSpace::PsdBall {
            order: self.coef.order(),
            radius: self.radius,
        }
    }
}

/// Observations X_{t_j}, j = 0..n, on the grid t_j = jT/n.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePath {
    pub dim: usize,
    pub step: f64,
    /// row-major (n + 1) × dim
    pub states: Vec<f64>,
}

impl SamplePath {
    pub fn len(&self) -> usize {
        self.states.len() / self.dim - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state(&self, j: usize) -> &[f64] {
        &self.states[j * self.dim..(j + 1) * self.dim]
    }
}

/// Euler–Maruyama with `euler_refine` substeps per observation step.
pub fn simulate_path<R: Rng + ?Sized>(
    model: &DiffusionModel,
    n: usize,
    euler_refine: usize,
    rng: &mut R,
) -> Result<SamplePath> {
    if n < 10 || euler_refine == 0 {
        return Err(Error::domain("simulate_path needs n ≥ 10 and euler_refine ≥ 1"));
    }
    let d = model.coef.state_dim();
    let m = model.coef.order();
    let h = model.horizon / n as f64;
    let dt = h / euler_refine as f64;
    let sdt = dt.sqrt();
    let mut x = model.x0.clone();
    let mut states = Vec::with_capacity((n + 1) * d);
    states.extend_from_slice(&x);
    let mut dw = DVector::zeros(m);
    for j in 0..n {
        for _ in 0..euler_refine {
            for w in dw.iter_mut() {
                *w = sdt * sample_normal(rng);
            }
            let sig = model.coef.eval(&x) * &model.sqrt_a;
            let inc = sig * &dw;
            for i in 0..d {
                x[i] += model.drift[i] * dt + inc[i];
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Simulation {
                step: j + 1,
                detail: "state is not finite".into(),
            });
        }
        states.extend_from_slice(&x);
    }
    Ok(SamplePath {
        dim: d,
        step: h,
        states,
    })
}

/// How the drift nuisance τ is set in the corrected quasi-likelihood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum DriftChoice {
    /// no correction
    None,
    /// least-squares fit (X_T − X_0)/T
    LeastSquares,
    Fixed(Vec<f64>),
}

/// Estimate of a constant drift.
pub fn drift_least_squares(path: &SamplePath) -> Vec<f64> {
    let n = path.len();
    let t = path.step * n as f64;
    (0..path.dim)
        .map(|i| (path.state(n)[i] - path.state(0)[i]) / t)
        .collect()
}

/// Per-step data for S(X_{t_{i−1}}, θ) = Σ θ_k B_k and residuals Δ_iX − hτ.
struct Design {
    d: usize,
    p: usize,
    n: usize,
    h: f64,
    /// n × p × d × d
    b: Vec<f64>,
    /// n × d
    r: Vec<f64>,
}

impl Design {
    fn new(path: &SamplePath, model: &DiffusionModel, drift: &DriftChoice) -> Result<Self> {
        let d = model.coef.state_dim();
        check_dim(d, path.dim)?;
        let m = model.coef.order();
        let pairs = SymHalfVec::pairs(m);
        let p = pairs.len();
        let n = path.len();
        let h = path.step;
        let tau = match drift {
            DriftChoice::None => vec![0.0; d],
            DriftChoice::LeastSquares => drift_least_squares(path),
            DriftChoice::Fixed(t) => {
                check_dim(d, t.len())?;
                t.clone()
            }
        };
        let mut b = Vec::with_capacity(n * p * d * d);
        let mut r = Vec::with_capacity(n * d);
        for i in 0..n {
            let x = path.state(i);
            let f = model.coef.eval(x);
            for &(a, c) in &pairs {
                // F E_ac F′ with E_ac the symmetric unit matrix of the pair
                for u in 0..d {
                    for v in 0..d {
                        let val = if a == c {
                            f[(u, a)] * f[(v, a)]
                        } else {
                            f[(u, a)] * f[(v, c)] + f[(u, c)] * f[(v, a)]
                        };
                        b.push(val);
                    }
                }
            }
            let y = path.state(i + 1);
            for u in 0..d {
                r.push(y[u] - x[u] - h * tau[u]);
            }
        }
        Ok(Self { d, p, n, h, b, r })
    }

    fn bmat(&self, i: usize, k: usize) -> DMatrix<f64> {
        let dd = self.d * self.d;
        let off = (i * self.p + k) * dd;
        DMatrix::from_row_slice(self.d, self.d, &self.b[off..off + dd])
    }

    fn eval(&self, theta: &[f64], level: Level) -> Result<Eval> {
        check_dim(self.p, theta.len())?;
        if self.d == 1 {
            return self.eval_scalar(theta, level);
        }
        let (p, d, h) = (self.p, self.d, self.h);
        let mut value = 0.0;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        let mut fisher = DMatrix::zeros(p, p);
        for i in 0..self.n {
            let bs: Vec<DMatrix<f64>> = (0..p).map(|k| self.bmat(i, k)).collect();
            let mut s = DMatrix::zeros(d, d);
            for (k, bk) in bs.iter().enumerate() {
                s += bk * theta[k];
            }
            let me = min_eigenvalue(&s);
            if !(me > SINGULAR_TOL) {
                return Err(Error::Singular { step: i, min_eig: me });
            }
            let chol = s.clone().cholesky().ok_or(Error::Singular { step: i, min_eig: me })?;
            let sinv = chol.inverse();
            let r = DVector::from_row_slice(&self.r[i * d..(i + 1) * d]);
            let w = &sinv * &r;
            let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            value -= 0.5 * (r.dot(&w) / h + logdet);
            if level == Level::Value {
                continue;
            }
            let ms: Vec<DMatrix<f64>> = bs.iter().map(|bk| &sinv * bk).collect();
            for k in 0..p {
                grad[k] += -0.5 * ms[k].trace() + 0.5 / h * w.dot(&(&bs[k] * &w));
            }
            if level == Level::Grad {
                continue;
            }
            for k in 0..p {
                for l in k..p {
                    let tr = (&ms[k] * &ms[l]).trace();
                    let quad = w.dot(&(&bs[k] * &sinv * &bs[l] * &w));
                    let hv = 0.5 * tr - quad / h;
                    hess[(k, l)] += hv;
                    fisher[(k, l)] -= 0.5 * tr;
                    if k != l {
                        hess[(l, k)] += hv;
                        fisher[(l, k)] -= 0.5 * tr;
                    }
                }
            }
        }
        Ok(Eval {
            value,
            grad,
            hess,
            fisher,
        })
    }

    fn eval_scalar(&self, theta: &[f64], level: Level) -> Result<Eval> {
        let (p, h) = (self.p, self.h);
        let mut value = 0.0;
        let mut grad = DVector::zeros(p);
        let mut hess = DMatrix::zeros(p, p);
        let mut fisher = DMatrix::zeros(p, p);
        for i in 0..self.n {
            let b = &self.b[i * p..(i + 1) * p];
            let s: f64 = b.iter().zip(theta).map(|(x, t)| x * t).sum();
            if !(s > SINGULAR_TOL) {
                return Err(Error::Singular { step: i, min_eig: s });
            }
            let r2 = self.r[i] * self.r[i];
            value -= 0.5 * (r2 / (h * s) + s.ln());
            if level == Level::Value {
                continue;
            }
            let s2 = s * s;
            for k in 0..p {
                grad[k] += -0.5 * b[k] / s + 0.5 * r2 * b[k] / (h * s2);
            }
            if level == Level::Grad {
                continue;
            }
            let s3 = s2 * s;
            for k in 0..p {
                for l in k..p {
                    let bb = b[k] * b[l];
                    let hv = 0.5 * bb / s2 - r2 * bb / (h * s3);
                    hess[(k, l)] += hv;
                    fisher[(k, l)] -= 0.5 * bb / s2;
                    if k != l {
                        hess[(l, k)] += hv;
                        fisher[(l, k)] -= 0.5 * bb / s2;
                    }
                }
            }
        }
        Ok(Eval {
            value,
            grad,
            hess,
            fisher,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Level {
    Value,
    Grad,
    Hess,
}

struct Eval {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
    fisher: DMatrix<f64>,
}

/// Ψ_n(θ), or its drift-corrected version when `drift` is not `None`.
pub fn quasi_loglik(path: &SamplePath, theta: &SymHalfVec, model: &DiffusionModel, drift: &DriftChoice) -> Result<f64> {
    let des = Design::new(path, model, drift)?;
    Ok(des.eval(theta.entries(), Level::Value)?.value)
}

/// ∂_θΨ_n(θ).
pub fn quasi_score(
    path: &SamplePath,
    theta: &SymHalfVec,
    model: &DiffusionModel,
    drift: &DriftChoice,
) -> Result<Vec<f64>> {
    let des = Design::new(path, model, drift)?;
    Ok(des.eval(theta.entries(), Level::Grad)?.grad.iter().cloned().collect())
}

/// ∂²_θΨ_n(θ).
pub fn quasi_hessian(
    path: &SamplePath,
    theta: &SymHalfVec,
    model: &DiffusionModel,
    drift: &DriftChoice,
) -> Result<DMatrix<f64>> {
    let des = Design::new(path, model, drift)?;
    Ok(des.eval(theta.entries(), Level::Hess)?.hess)
}

/// Left-endpoint Riemann sum (1/2n) Σ tr(S⁻¹∂_kS S⁻¹∂_lS) at θ*.
pub fn gamma_info(path: &SamplePath, theta_star: &SymHalfVec, model: &DiffusionModel) -> Result<DMatrix<f64>> {
    let des = Design::new(path, model, &DriftChoice::None)?;
    let e = des.eval(theta_star.entries(), Level::Hess)?;
    Ok(-e.fisher / des.n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QmleOptions {
    pub max_iter: usize,
    pub qp_iter: usize,
    pub drift: DriftChoice,
}

impl Default for QmleOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            qp_iter: 2000,
            drift: DriftChoice::LeastSquares,
        }
    }
}

/// max g′(z − θ) + ½(z − θ)′H(z − θ) over z in the space, H negative definite.
fn qp_step(space: &ThetaSpace, theta: &DVector<f64>, g: &DVector<f64>, h: &DMatrix<f64>, iters: usize) -> DVector<f64> {
    let neg = -h;
    if let Some(ch) = neg.clone().cholesky() {
        let z = theta + ch.solve(g);
        let zv: Vec<f64> = z.iter().cloned().collect();
        if space.contains_with_tol(&zv, &vec![0.0; zv.len()]) {
            return z;
        }
    }
    if let ThetaSpace::PsdBall { order: 2, radius } = space {
        if let Some(ch) = neg.clone().cholesky() {
            let c = theta + ch.solve(g);
            let q = [
                [neg[(0, 0)], neg[(0, 1)], neg[(0, 2)]],
                [neg[(1, 0)], neg[(1, 1)], neg[(1, 2)]],
                [neg[(2, 0)], neg[(2, 1)], neg[(2, 2)]],
            ];
            let z = min_quadratic_psd2(&q, [c[0], c[1], c[2]]);
            if z[0] * z[0] + 2.0 * z[1] * z[1] + z[2] * z[2] <= radius * radius {
                return DVector::from_column_slice(&z);
            }
        }
    }
    let lip = max_eigenvalue(&neg).max(1e-300);
    let proj = |v: &DVector<f64>| DVector::from_vec(space.project(v.as_slice()));
    let model = |z: &DVector<f64>| {
        let dz = z - theta;
        g.dot(&dz) - 0.5 * dz.dot(&(&neg * &dz))
    };
    let mut x = proj(theta);
    let mut fx = model(&x);
    let mut y = x.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let grad = g - &neg * (&y - theta);
        let z = proj(&(&y + grad / lip));
        let fz = model(&z);
        let moved = (&z - &y).norm();
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        if fz >= fx {
            let prev = x.clone();
            x = z;
            fx = fz;
            y = &x + (&x - &prev) * ((t - 1.0) / t_next);
            t = t_next;
        } else {
            y = x.clone();
            t = 1.0;
        }
        if moved <= 1e-13 * (1.0 + y.norm()) {
            break;
        }
    }
    x
}

fn sqp(des: &Design, space: &ThetaSpace, start: DVector<f64>, opts: &QmleOptions) -> Result<(DVector<f64>, f64)> {
    let value = |t: &DVector<f64>| match des.eval(t.as_slice(), Level::Value) {
        Ok(e) => Ok(e.value),
        Err(Error::Singular { .. }) => Ok(f64::NEG_INFINITY),
        Err(e) => Err(e),
    };
    let mut theta = start;
    let mut f = value(&theta)?;
    if !f.is_finite() {
        return Err(Error::domain("QMLE start is singular"));
    }
    for _ in 0..opts.max_iter {
        let e = des.eval(theta.as_slice(), Level::Hess)?;
        let h = if (-&e.hess).cholesky().is_some() {
            e.hess.clone()
        } else {
            e.fisher.clone()
        };
        let z = qp_step(space, &theta, &e.grad, &h, opts.qp_iter);
        let dir = &z - &theta;
        if dir.norm() <= 1e-13 * (1.0 + theta.norm()) {
            return Ok((theta, f));
        }
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha >= 1e-12 {
            let cand = &theta + &dir * alpha;
            let fc = value(&cand)?;
            if fc > f {
                theta = cand;
                f = fc;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            // no ascent along the model step: stationary up to rounding
            let gscale = e.grad.norm() * dir.norm();
            if gscale <= 1e-8 * (1.0 + f.abs()) || dir.norm() <= 1e-8 * (1.0 + theta.norm()) {
                return Ok((theta, f));
            }
            return Err(Error::NonConvergence {
                what: "diffusion QMLE",
                detail: format!("line search failed, step {:e}", dir.norm()),
                candidates: vec![theta.iter().cloned().collect()],
            });
        }
    }
    Ok((theta, f))
}

/// PSD- and norm-constrained maximiser of the quasi-likelihood.
pub fn qmle_psd(path: &SamplePath, model: &DiffusionModel, opts: &QmleOptions) -> Result<SymHalfVec> {
    let des = Design::new(path, model, &opts.drift)?;
    let space = model.space();
    let m = model.coef.order();
    let p = des.p;
    // least-squares fit of r r′/h onto span{B_k}
    let dd = des.d * des.d;
    let mut ata = DMatrix::zeros(p, p);
    let mut atb = DVector::zeros(p);
    let mut tr_b = 0.0;
    let mut tr_r = 0.0;
    for i in 0..des.n {
        let r = &des.r[i * des.d..(i + 1) * des.d];
        for k in 0..p {
            let bk = &des.b[(i * p + k) * dd..(i * p + k + 1) * dd];
            for l in 0..p {
                let bl = &des.b[(i * p + l) * dd..(i * p + l + 1) * dd];
                ata[(k, l)] += bk.iter().zip(bl).map(|(a, b)| a * b).sum::<f64>();
            }
            let mut s = 0.0;
            for u in 0..des.d {
                for v in 0..des.d {
                    s += bk[u * des.d + v] * r[u] * r[v] / des.h;
                }
            }
            atb[k] += s;
        }
        let diag_pairs = SymHalfVec::pairs(m);
        for (k, (a, c)) in diag_pairs.iter().enumerate() {
            if a == c {
                let bk = &des.b[(i * p + k) * dd..(i * p + k + 1) * dd];
                tr_b += (0..des.d).map(|u| bk[u * des.d + u]).sum::<f64>();
            }
        }
        tr_r += r.iter().map(|v| v * v).sum::<f64>() / des.h;
    }
    let scale = (tr_r / tr_b.max(1e-300)).max(1e-6);
    let ident = DVector::from_iterator(
        p,
        SymHalfVec::pairs(m)
            .into_iter()
            .map(|(a, c)| if a == c { scale } else { 0.0 }),
    );
    let ident = DVector::from_vec(space.project(ident.as_slice()));
    let mut starts = vec![ident.clone()];
    if let Some(sol) = ata.clone().cholesky().map(|c| c.solve(&atb)) {
        let ls = DVector::from_vec(space.project(sol.as_slice()));
        starts.push(&ls * 0.9 + &ident * 0.1);
        starts.push(ls);
    }
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut last_err = None;
    for s in starts {
        match sqp(&des, &space, s, opts) {
            Ok((t, f)) => {
                if best.as_ref().is_none_or(|b| f > b.1) {
                    best = Some((t, f));
                }
            }
            Err(e @ Error::Domain(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    let (theta, _) = best.ok_or_else(|| last_err.unwrap_or_else(|| Error::domain("no usable QMLE start")))?;
    // land exactly in the constraint set
    let t = space.project(theta.as_slice());
    SymHalfVec::new(m, t)
}

/// Γ realisations computed from fresh paths of the model.
#[derive(Clone, Debug)]
pub struct PathGamma {
    pub model: DiffusionModel,
    pub n: usize,
    pub euler_refine: usize,
}

impl GammaGenerator for PathGamma {
    fn dim(&self) -> usize {
        self.model.param_dim()
    }

    fn generate(&self, rng: &mut SimRng) -> Result<DMatrix<f64>> {
        let path = simulate_path(&self.model, self.n, self.euler_refine, rng)?;
        gamma_info(&path, &self.model.theta_star(), &self.model)
    }
}

/// Limit field on the tangent cone of the PSD cone at A*, with Γ drawn
/// from fresh paths.
pub fn diffusion_limit_spec(model: &DiffusionModel, gamma_n: usize, euler_refine: usize) -> Result<LimitFieldSpec> {
    let domain = LocalSet::psd_tangent_cone(model.a_star())?;
    let gen = PathGamma {
        model: model.clone(),
        n: gamma_n,
        euler_refine,
    };
    LimitFieldSpec::new(
        model.param_dim(),
        PreMap::Identity,
        GammaSource::Generator(Arc::new(gen)),
        vec![],
        vec![],
        domain,
    )
}

/// Configuration of a built-in model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub coef: CoefficientMap,
    /// rows of A*
    pub a_star: Vec<Vec<f64>>,
    #[serde(default)]
    pub drift: Option<Vec<f64>>,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
}

fn one() -> f64 {
    1.0
}

fn default_radius() -> f64 {
    10.0
}

impl ModelConfig {
    pub fn build(&self) -> Result<DiffusionModel> {
        let m = self.a_star.len();
        if self.a_star.iter().any(|r| r.len() != m) {
            return Err(Error::domain("A* must be square"));
        }
        let a = DMatrix::from_fn(m, m, |i, j| self.a_star[i][j]);
        let d = self.coef.state_dim();
        DiffusionModel::new(
            self.coef,
            self.drift.clone().unwrap_or_else(|| vec![0.0; d]),
            a,
            self.horizon,
            self.radius,
            self.x0.clone().unwrap_or_else(|| vec![0.0; d]),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairingConfig {
    pub model: ModelConfig,
    pub n_grid: Vec<usize>,
    #[serde(default = "default_refine")]
    pub euler_refine: usize,
    pub reps: usize,
    #[serde(default = "default_limit_draws")]
    pub limit_draws: usize,
    #[serde(default = "default_drift_choice")]
    pub drift: DriftChoice,
    pub seed: u64,
}

fn default_refine() -> usize {
    10
}

fn default_limit_draws() -> usize {
    2000
}

fn default_drift_choice() -> DriftChoice {
    DriftChoice::LeastSquares
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairingRow {
    pub rep: usize,
    pub u_hat: Vec<f64>,
    pub v_hat: Vec<f64>,
    pub gap: f64,
    /// smallest eigenvalue of Â
    pub min_eig: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairingCell {
    pub n: usize,
    pub rows: Vec<PairingRow>,
    pub median_gap: f64,
    pub p90_gap: f64,
    pub ks: Vec<f64>,
    pub failures: Vec<RepFailure>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairingSummary {
    pub cells: Vec<PairingCell>,
    pub limit_rows: Vec<Vec<f64>>,
}

/// One replication: û_n = √n(θ̂ − θ*) and v̂_n = argmax over the tangent
/// cone of Δ_n[u] − ½Γ_n[u⊗2] from the same path.
pub fn pairing_replication(
    model: &DiffusionModel,
    spec: &LimitFieldSpec,
    n: usize,
    euler_refine: usize,
    drift: &DriftChoice,
    rng: &mut SimRng,
) -> Result<PairingRow> {
    let path = simulate_path(model, n, euler_refine, rng)?;
    let opts = QmleOptions {
        drift: drift.clone(),
        ..QmleOptions::default()
    };
    let est = qmle_psd(&path, model, &opts)?;
    let star = model.theta_star();
    let sn = (n as f64).sqrt();
    let u_hat: Vec<f64> = est
        .entries()
        .iter()
        .zip(star.entries())
        .map(|(a, b)| sn * (a - b))
        .collect();
    let des = Design::new(&path, model, drift)?;
    let e = des.eval(star.entries(), Level::Hess)?;
    let gamma = -e.fisher / n as f64;
    let delta = e.grad / sn;
    let v_hat = argmax(spec, &FieldDraw { gamma, delta }, &ArgmaxOptions::default())?;
    let gap = crate::linalg::dist(&u_hat, &v_hat);
    let min_eig = min_eigenvalue(&sym_matrix_from_half(model.coef.order(), est.entries()));
    Ok(PairingRow {
        rep: 0,
        u_hat,
        v_hat,
        gap,
        min_eig,
    })
}

pub fn pairing_experiment(cfg: &PairingConfig) -> Result<PairingSummary> {
    if cfg.reps == 0 || cfg.n_grid.is_empty() {
        return Err(Error::domain("experiment needs reps ≥ 1 and a non-empty n grid"));
    }
    let model = cfg.model.build()?;
    let gamma_n = *cfg.n_grid.iter().min().expect("non-empty");
    let spec = diffusion_limit_spec(&model, gamma_n, cfg.euler_refine)?;
    let limit = simulate_limit(&spec, cfg.limit_draws, derive_seed(cfg.seed, "diffusion/limit", 0))?;
    let mut cells = Vec::new();
    for &n in &cfg.n_grid {
        let tag = format!("diffusion/n{n}");
        let results: Vec<Result<PairingRow>> = (0..cfg.reps)
            .into_par_iter()
            .map(|r| {
                let mut rng = rng_for(cfg.seed, &tag, r as u64);
                pairing_replication(&model, &spec, n, cfg.euler_refine, &cfg.drift, &mut rng)
            })
            .collect();
        let (ok, failures) = split_outcomes(results);
        let rows: Vec<PairingRow> = ok.into_iter().map(|(rep, row)| PairingRow { rep, ..row }).collect();
        let gaps: Vec<f64> = rows.iter().map(|r| r.gap).collect();
        let mut sorted = gaps.clone();
        sorted.sort_by(f64::total_cmp);
        let p90 = if sorted.is_empty() {
            f64::NAN
        } else {
            sorted[((0.9 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1]
        };
        let u_rows: Vec<Vec<f64>> = rows.iter().map(|r| r.u_hat.clone()).collect();
        let ks = (0..model.param_dim())
            .map(|j| ks_or_nan(&column(&u_rows, j), &column(&limit.rows, j)))
            .collect();
        cells.push(PairingCell {
            n,
            median_gap: median(&gaps),
            p90_gap: p90,
            ks,
            rows,
            failures,
        });
    }
    Ok(PairingSummary {
        cells,
        limit_rows: limit.rows,
    })
}
