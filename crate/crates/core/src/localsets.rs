//! Local approximating sets: the rescaled parameter sets U_T around a true
//! value, their limits U, projections, and sampled geometry statistics.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{
    clip_psd, clip_psd_ball, dist, min_eigenvalue, norm, project_half_metric, project_psd2_half, sym_matrix_from_half,
    SymHalfVec,
};
use crate::specfun::sample_normal;

const MEMBER_TOL: f64 = 1e-12;

/// Diagonal normaliser a_T with (a_T)_jj = T^(−e_j/2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    exponents: Vec<f64>,
}

impl RateSchedule {
    pub fn new(exponents: Vec<f64>) -> Result<Self> {
        if exponents.is_empty() || exponents.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return Err(Error::domain("rate exponents must be positive and finite"));
        }
        Ok(Self { exponents })
    }

    pub fn uniform(p: usize) -> Self {
        Self {
            exponents: vec![1.0; p],
        }
    }

    /// Base exponents raised to per-coordinate powers ρ_j.
    pub fn penalized(base: &[f64], rho: &[f64]) -> Result<Self> {
        check_dim(base.len(), rho.len())?;
        Self::new(base.iter().zip(rho).map(|(e, r)| e * r).collect())
    }

    pub fn dim(&self) -> usize {
        self.exponents.len()
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    pub fn diag(&self, t: f64) -> Vec<f64> {
        self.exponents.iter().map(|e| t.powf(-e / 2.0)).collect()
    }

    pub fn matrix(&self, t: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.diag(t)))
    }

    /// Smallest eigenvalue of (a_T′a_T)^(−1).
    pub fn b_t(&self, t: f64) -> f64 {
        self.exponents.iter().map(|e| t.powf(*e)).fold(f64::INFINITY, f64::min)
    }
}

/// Parameter space Θ in half-vector coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ThetaSpace {
    Box {
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    /// ψ of {A PSD of the given order, ||A||_F <= radius}
    PsdBall {
        order: usize,
        radius: f64,
    },
    Product {
        parts: Vec<ThetaSpace>,
    },
}

impl ThetaSpace {
    pub fn dim(&self) -> usize {
        match self {
            ThetaSpace::Box { lo, .. } => lo.len(),
            ThetaSpace::PsdBall { order, .. } => SymHalfVec::len_for(*order),
            ThetaSpace::Product { parts } => parts.iter().map(|p| p.dim()).sum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ThetaSpace::Box { lo, hi } => {
                check_dim(lo.len(), hi.len())?;
                if lo.iter().zip(hi).any(|(a, b)| !(a <= b)) {
                    return Err(Error::domain("box needs lo <= hi"));
                }
            }
            ThetaSpace::PsdBall { order, radius } => {
                if *order == 0 || !(*radius > 0.0) {
                    return Err(Error::domain("psd ball needs order >= 1 and radius > 0"));
                }
            }
            ThetaSpace::Product { parts } => {
                for p in parts {
                    p.validate()?;
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        let tol = vec![MEMBER_TOL; theta.len()];
        self.contains_with_tol(theta, &tol)
    }

    /// Membership with a per-coordinate slack.
    pub fn contains_with_tol(&self, theta: &[f64], tol: &[f64]) -> bool {
        if theta.len() != self.dim() {
            return false;
        }
        match self {
            ThetaSpace::Box { lo, hi } => theta
                .iter()
                .zip(lo.iter().zip(hi))
                .zip(tol)
                .all(|((x, (a, b)), t)| *x >= a - t && *x <= b + t),
            ThetaSpace::PsdBall { order, radius } => {
                let a = sym_matrix_from_half(*order, theta);
                let slack = tol.iter().cloned().fold(0.0, f64::max);
                if a.norm() > radius + slack {
                    return false;
                }
                if *order == 2 {
                    let (p, q, r) = (theta[0], theta[1], theta[2]);
                    let (tp, tq, tr) = (tol[0], tol[1], tol[2]);
                    p >= -tp && r >= -tr && p * r - q * q >= -(tp * r.abs() + tr * p.abs() + 2.0 * tq * q.abs())
                } else {
                    min_eigenvalue(&a) >= -slack
                }
            }
            ThetaSpace::Product { parts } => {
                let mut off = 0;
                for p in parts {
                    let d = p.dim();
                    if !p.contains_with_tol(&theta[off..off + d], &tol[off..off + d]) {
                        return false;
                    }
                    off += d;
                }
                true
            }
        }
    }

    /// Euclidean projection in these coordinates.
    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            ThetaSpace::Box { lo, hi } => theta
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(x, (a, b))| x.clamp(*a, *b))
                .collect(),
            ThetaSpace::PsdBall { order, radius } => {
                let r = *radius;
                if *order == 2 {
                    let c = project_psd2_half([theta[0], theta[1], theta[2]]);
                    if c[0] * c[0] + 2.0 * c[1] * c[1] + c[2] * c[2] <= r * r {
                        return c.to_vec();
                    }
                }
                project_half_metric(*order, theta, |a| clip_psd_ball(a, r))
            }
            ThetaSpace::Product { parts } => {
                let mut out = Vec::with_capacity(theta.len());
                let mut off = 0;
                for p in parts {
                    let d = p.dim();
                    out.extend(p.project(&theta[off..off + d]));
                    off += d;
                }
                out
            }
        }
    }

    /// Projection of u onto {u : θ* + diag(scale) u ∈ Θ}, when it is available in
    /// closed form (boxes always; PSD parts only under a uniform scale).
    fn project_scaled(&self, theta_star: &[f64], scale: &[f64], u: &[f64]) -> Option<Vec<f64>> {
        match self {
            ThetaSpace::Box { lo, hi } => Some(
                (0..u.len())
                    .map(|j| {
                        let lo_u = (lo[j] - theta_star[j]) / scale[j];
                        let hi_u = (hi[j] - theta_star[j]) / scale[j];
                        u[j].clamp(lo_u, hi_u)
                    })
                    .collect(),
            ),
            ThetaSpace::PsdBall { .. } => {
                let s = scale[0];
                if scale.iter().any(|x| (x - s).abs() > 1e-15 * s) {
                    return None;
                }
                let theta: Vec<f64> = theta_star.iter().zip(u).map(|(t, x)| t + s * x).collect();
                let p = self.project(&theta);
                Some(p.iter().zip(theta_star).map(|(a, t)| (a - t) / s).collect())
            }
            ThetaSpace::Product { parts } => {
                let mut out = Vec::with_capacity(u.len());
                let mut off = 0;
                for p in parts {
                    let d = p.dim();
                    let r = off..off + d;
                    out.extend(p.project_scaled(&theta_star[r.clone()], &scale[r.clone()], &u[r])?);
                    off += d;
                }
                Some(out)
            }
        }
    }
}

/// Allowed sign of one coordinate of a box cone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Free,
    NonNeg,
    NonPos,
    Zero,
}

impl Side {
    pub fn interval(self) -> (f64, f64) {
        match self {
            Side::Free => (f64::NEG_INFINITY, f64::INFINITY),
            Side::NonNeg => (0.0, f64::INFINITY),
            Side::NonPos => (f64::NEG_INFINITY, 0.0),
            Side::Zero => (0.0, 0.0),
        }
    }

    pub fn holds(self, x: f64) -> bool {
        let (lo, hi) = self.interval();
        x >= lo - MEMBER_TOL && x <= hi + MEMBER_TOL
    }

    pub fn clip(self, x: f64) -> f64 {
        let (lo, hi) = self.interval();
        x.clamp(lo, hi)
    }

    pub fn intersect(self, other: Side) -> Side {
        use Side::*;
        match (self, other) {
            (Free, s) | (s, Free) => s,
            (Zero, _) | (_, Zero) => Zero,
            (NonNeg, NonPos) | (NonPos, NonNeg) => Zero,
            (s, _) => s,
        }
    }
}

/// f(u) = constant + Σ linear_i u_i + Σ quadratic_(i,j) u_i u_j.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConstraint {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub linear: Vec<(usize, f64)>,
    #[serde(default)]
    pub quadratic: Vec<(usize, usize, f64)>,
}

impl QuadraticConstraint {
    pub fn eval(&self, u: &[f64]) -> f64 {
        self.constant
            + self.linear.iter().map(|&(i, c)| c * u[i]).sum::<f64>()
            + self.quadratic.iter().map(|&(i, j, c)| c * u[i] * u[j]).sum::<f64>()
    }

    fn scale(&self, u: &[f64]) -> f64 {
        1.0 + self.constant.abs()
            + self.linear.iter().map(|&(i, c)| (c * u[i]).abs()).sum::<f64>()
            + self
                .quadratic
                .iter()
                .map(|&(i, j, c)| (c * u[i] * u[j]).abs())
                .sum::<f64>()
    }

    fn max_index(&self) -> Option<usize> {
        let a = self.linear.iter().map(|&(i, _)| i);
        let b = self.quadratic.iter().flat_map(|&(i, j, _)| [i, j]);
        a.chain(b).max()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LocalSet {
    BoxCone {
        sides: Vec<Side>,
    },
    /// ψ({w : K′wK PSD}); `kernel` holds orthonormal columns of K.
    PsdTangentCone {
        order: usize,
        kernel: Vec<Vec<f64>>,
    },
    /// {curvature·u_k − u_j² ≥ 0} intersected with per-coordinate sides,
    /// j = `square_index`, k = `linear_index`.
    Parabolic {
        sides: Vec<Side>,
        square_index: usize,
        linear_index: usize,
        curvature: f64,
    },
    Product {
        parts: Vec<LocalSet>,
    },
    HalfSpaceSystem {
        base: Box<LocalSet>,
        constraints: Vec<QuadraticConstraint>,
        plus: Vec<usize>,
    },
    FiniteShift {
        theta_star: Vec<f64>,
        rate: RateSchedule,
        t: f64,
        space: ThetaSpace,
    },
}

impl LocalSet {
    pub fn box_cone(sides: Vec<Side>) -> Self {
        LocalSet::BoxCone { sides }
    }

    pub fn whole_space(p: usize) -> Self {
        LocalSet::BoxCone {
            sides: vec![Side::Free; p],
        }
    }

    /// Box cone at a point of a box: coordinates sitting on a lower (upper)
    /// face become half-lines [0, ∞) ((−∞, 0]), interior ones are free.
    pub fn box_tangent(theta_star: &[f64], lo: &[f64], hi: &[f64]) -> Result<Self> {
        check_dim(theta_star.len(), lo.len())?;
        check_dim(theta_star.len(), hi.len())?;
        let sides = (0..theta_star.len())
            .map(|j| {
                let (a, b, t) = (lo[j], hi[j], theta_star[j]);
                match (t <= a, t >= b) {
                    (true, true) => Side::Zero,
                    (true, false) => Side::NonNeg,
                    (false, true) => Side::NonPos,
                    _ => Side::Free,
                }
            })
            .collect();
        Ok(LocalSet::BoxCone { sides })
    }

    /// Tangent cone of the PSD cone at `a_star`, with K spanning Ker(A*).
    pub fn psd_tangent_cone(a_star: &DMatrix<f64>) -> Result<Self> {
        if a_star.nrows() != a_star.ncols() {
            return Err(Error::domain("A* must be square"));
        }
        if min_eigenvalue(a_star) < -1e-10 {
            return Err(Error::domain("A* must be positive semidefinite"));
        }
        let k = crate::linalg::kernel_basis(a_star, 1e-10);
        let kernel = (0..k.ncols()).map(|c| k.column(c).iter().cloned().collect()).collect();
        Ok(LocalSet::PsdTangentCone {
            order: a_star.nrows(),
            kernel,
        })
    }

    /// {(w1, w2, w3) : curvature·w3 − w2² ≥ 0}.
    pub fn parabolic(curvature: f64) -> Result<Self> {
        let s = LocalSet::Parabolic {
            sides: vec![Side::Free, Side::Free, Side::NonNeg],
            square_index: 1,
            linear_index: 2,
            curvature,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn product(parts: Vec<LocalSet>) -> Self {
        LocalSet::Product { parts }
    }

    pub fn dim(&self) -> usize {
        match self {
            LocalSet::BoxCone { sides } => sides.len(),
            LocalSet::PsdTangentCone { order, .. } => SymHalfVec::len_for(*order),
            LocalSet::Parabolic { sides, .. } => sides.len(),
            LocalSet::Product { parts } => parts.iter().map(|p| p.dim()).sum(),
            LocalSet::HalfSpaceSystem { base, .. } => base.dim(),
            LocalSet::FiniteShift { theta_star, .. } => theta_star.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LocalSet::BoxCone { .. } => Ok(()),
            LocalSet::PsdTangentCone { order, kernel } => {
                for c in kernel {
                    check_dim(*order, c.len())?;
                }
                Ok(())
            }
            LocalSet::Parabolic {
                sides,
                square_index,
                linear_index,
                curvature,
            } => {
                let p = sides.len();
                if *square_index >= p || *linear_index >= p || square_index == linear_index {
                    return Err(Error::domain("parabolic indices out of range"));
                }
                if !(*curvature > 0.0) {
                    return Err(Error::domain("parabolic curvature must be positive"));
                }
                if sides[*square_index] != Side::Free || !matches!(sides[*linear_index], Side::Free | Side::NonNeg) {
                    return Err(Error::domain("parabolic coordinates must be unconstrained"));
                }
                Ok(())
            }
            LocalSet::Product { parts } => parts.iter().try_for_each(|p| p.validate()),
            LocalSet::HalfSpaceSystem { base, constraints, .. } => {
                base.validate()?;
                for c in constraints {
                    if c.max_index().is_some_and(|i| i >= base.dim()) {
                        return Err(Error::domain("constraint index out of range"));
                    }
                }
                Ok(())
            }
            LocalSet::FiniteShift {
                theta_star,
                rate,
                t,
                space,
            } => {
                check_dim(space.dim(), theta_star.len())?;
                check_dim(rate.dim(), theta_star.len())?;
                space.validate()?;
                if !(*t > 0.0) {
                    return Err(Error::domain("T must be positive"));
                }
                Ok(())
            }
        }
    }

    pub fn is_limit_kind(&self) -> bool {
        match self {
            LocalSet::FiniteShift { .. } => false,
            LocalSet::Product { parts } => parts.iter().all(|p| p.is_limit_kind()),
            LocalSet::HalfSpaceSystem { base, .. } => base.is_limit_kind(),
            _ => true,
        }
    }

    pub fn contains(&self, u: &[f64]) -> Result<bool> {
        check_dim(self.dim(), u.len())?;
        Ok(self.contains_unchecked(u))
    }

    fn contains_unchecked(&self, u: &[f64]) -> bool {
        match self {
            LocalSet::BoxCone { sides } => sides.iter().zip(u).all(|(s, x)| s.holds(*x)),
            LocalSet::PsdTangentCone { order, kernel } => {
                if kernel.is_empty() {
                    return true;
                }
                let b = kernel_block(*order, kernel, u);
                let scale = 1.0 + norm(u);
                min_eigenvalue(&b) >= -MEMBER_TOL * scale
            }
            LocalSet::Parabolic {
                sides,
                square_index: j,
                linear_index: k,
                curvature: a,
            } => {
                if !sides.iter().zip(u).all(|(s, x)| s.holds(*x)) {
                    return false;
                }
                let r = a * u[*k] - u[*j] * u[*j];
                r >= -MEMBER_TOL * (1.0 + (a * u[*k]).abs() + u[*j] * u[*j])
            }
            LocalSet::Product { parts } => {
                let mut off = 0;
                for p in parts {
                    let d = p.dim();
                    if !p.contains_unchecked(&u[off..off + d]) {
                        return false;
                    }
                    off += d;
                }
                true
            }
            LocalSet::HalfSpaceSystem { base, constraints, .. } => {
                base.contains_unchecked(u) && constraints.iter().all(|c| c.eval(u) >= -MEMBER_TOL * c.scale(u))
            }
            LocalSet::FiniteShift {
                theta_star,
                rate,
                t,
                space,
            } => {
                let scale = rate.diag(*t);
                let theta: Vec<f64> = (0..u.len()).map(|j| theta_star[j] + scale[j] * u[j]).collect();
                let tol: Vec<f64> = scale.iter().map(|s| MEMBER_TOL * s).collect();
                space.contains_with_tol(&theta, &tol)
            }
        }
    }

    /// Rewrite a half-space system in terms of box cones and a parabola when
    /// every constraint has one of the forms c·u_k, −c·u_j² or a·u_k − c·u_j².
    pub fn canonicalize(&self) -> Result<LocalSet> {
        let LocalSet::HalfSpaceSystem { base, constraints, .. } = self else {
            return Ok(self.clone());
        };
        let base = base.canonicalize()?;
        let LocalSet::BoxCone { sides } = base else {
            return Err(Error::Unsupported("half-space system over a non-box base".into()));
        };
        let mut sides = sides;
        let mut parabola: Option<(usize, usize, f64)> = None;
        for c in constraints {
            if c.constant != 0.0 {
                return Err(Error::Unsupported("constraint with a constant term".into()));
            }
            let lin: Vec<_> = c.linear.iter().filter(|(_, v)| *v != 0.0).collect();
            let quad: Vec<_> = c.quadratic.iter().filter(|(_, _, v)| *v != 0.0).collect();
            match (lin.as_slice(), quad.as_slice()) {
                ([], []) => {}
                ([&(k, v)], []) => {
                    let s = if v > 0.0 { Side::NonNeg } else { Side::NonPos };
                    sides[k] = sides[k].intersect(s);
                }
                ([], [&(i, j, v)]) if i == j && v < 0.0 => {
                    sides[i] = Side::Zero;
                }
                ([&(k, a)], [&(i, j, v)]) if i == j && v < 0.0 && a > 0.0 && k != i => {
                    if parabola.is_some() {
                        return Err(Error::Unsupported("more than one parabolic constraint".into()));
                    }
                    parabola = Some((i, k, a / -v));
                }
                _ => return Err(Error::Unsupported(format!("constraint shape not recognised: {c:?}"))),
            }
        }
        match parabola {
            None => Ok(LocalSet::BoxCone { sides }),
            Some((j, k, a)) => {
                if sides[j] == Side::Zero {
                    // u_j = 0 turns the parabola into a·u_k ≥ 0
                    sides[k] = sides[k].intersect(Side::NonNeg);
                    return Ok(LocalSet::BoxCone { sides });
                }
                if sides[k] == Side::Zero {
                    sides[j] = Side::Zero;
                    return Ok(LocalSet::BoxCone { sides });
                }
                sides[k] = sides[k].intersect(Side::NonNeg);
                let s = LocalSet::Parabolic {
                    sides,
                    square_index: j,
                    linear_index: k,
                    curvature: a,
                };
                s.validate()?;
                Ok(s)
            }
        }
    }

    /// Euclidean projection.
    pub fn project(&self, u: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), u.len())?;
        match self {
            LocalSet::BoxCone { sides } => Ok(sides.iter().zip(u).map(|(s, x)| s.clip(*x)).collect()),
            LocalSet::PsdTangentCone { order, kernel } => Ok(project_tangent_cone(*order, kernel, u)),
            LocalSet::Parabolic {
                sides,
                square_index: j,
                linear_index: k,
                curvature: a,
            } => {
                let mut v: Vec<f64> = sides.iter().zip(u).map(|(s, x)| s.clip(*x)).collect();
                let (wj, wk) = project_parabola(*a, u[*j], u[*k])?;
                v[*j] = wj;
                v[*k] = wk;
                Ok(v)
            }
            LocalSet::Product { parts } => {
                let mut out = Vec::with_capacity(u.len());
                let mut off = 0;
                for p in parts {
                    let d = p.dim();
                    out.extend(p.project(&u[off..off + d])?);
                    off += d;
                }
                Ok(out)
            }
            LocalSet::HalfSpaceSystem { .. } => self.canonicalize()?.project(u),
            LocalSet::FiniteShift {
                theta_star,
                rate,
                t,
                space,
            } => {
                let scale = rate.diag(*t);
                space
                    .project_scaled(theta_star, &scale, u)
                    .ok_or_else(|| Error::Unsupported("projection onto a PSD set under a non-uniform rate".into()))
            }
        }
    }

    /// Distance from u to the set, if a projection is available.
    pub fn distance(&self, u: &[f64]) -> Result<Option<f64>> {
        match self.project(u) {
            Ok(p) => Ok(Some(dist(u, &p))),
            Err(Error::Unsupported(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Coordinates forced to zero, used to sample lower-dimensional sets.
    fn pinned(&self) -> Vec<bool> {
        match self {
            LocalSet::BoxCone { sides } | LocalSet::Parabolic { sides, .. } => {
                sides.iter().map(|s| *s == Side::Zero).collect()
            }
            LocalSet::Product { parts } => parts.iter().flat_map(|p| p.pinned()).collect(),
            LocalSet::HalfSpaceSystem { .. } => match self.canonicalize() {
                Ok(c) => c.pinned(),
                Err(_) => vec![false; self.dim()],
            },
            _ => vec![false; self.dim()],
        }
    }

    /// Rejection sample of `n` points uniform in set ∩ B_R (uniform on the
    /// free coordinates when some coordinates are pinned to zero).
    pub fn sample_in_ball<R: Rng + ?Sized>(
        &self,
        radius: f64,
        n: usize,
        max_attempts: usize,
        rng: &mut R,
    ) -> Vec<Vec<f64>> {
        let pinned = self.pinned();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n && attempts < max_attempts {
            attempts += 1;
            let u = uniform_in_ball(&pinned, radius, rng);
            if self.contains_unchecked(&u) {
                out.push(u);
            }
        }
        out
    }
}

fn kernel_block(order: usize, kernel: &[Vec<f64>], u: &[f64]) -> DMatrix<f64> {
    let w = sym_matrix_from_half(order, u);
    let k = DMatrix::from_fn(order, kernel.len(), |i, c| kernel[c][i]);
    k.transpose() * w * k
}

fn project_tangent_cone(order: usize, kernel: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
    match kernel.len() {
        0 => u.to_vec(),
        1 => {
            // K′wK is the linear functional c·u; project onto a half-space.
            let kv = &kernel[0];
            let c: Vec<f64> = SymHalfVec::pairs(order)
                .into_iter()
                .map(|(i, j)| if i == j { kv[i] * kv[i] } else { 2.0 * kv[i] * kv[j] })
                .collect();
            let val: f64 = c.iter().zip(u).map(|(a, b)| a * b).sum();
            if val >= 0.0 {
                return u.to_vec();
            }
            let cc: f64 = c.iter().map(|x| x * x).sum();
            u.iter().zip(&c).map(|(x, ci)| x - val / cc * ci).collect()
        }
        _ => {
            let k = DMatrix::from_fn(order, kernel.len(), |i, c| kernel[c][i]);
            project_half_metric(order, u, |w| {
                let b = k.transpose() * w * &k;
                let fix = &b - clip_psd(&b);
                w - &k * fix * k.transpose()
            })
        }
    }
}

/// Nearest point to (x_j, x_k) on {a·w_k ≥ w_j²}, via the Lagrange multiplier.
pub(crate) fn project_parabola(a: f64, xj: f64, xk: f64) -> Result<(f64, f64)> {
    if a * xk - xj * xj >= 0.0 {
        return Ok((xj, xk));
    }
    // φ(μ) = a(x_k + μa) − x_j²/(1+2μ)² is increasing with φ(0) < 0.
    let phi = |mu: f64| a * (xk + mu * a) - xj * xj / ((1.0 + 2.0 * mu) * (1.0 + 2.0 * mu));
    let dphi = |mu: f64| a * a + 4.0 * xj * xj / (1.0 + 2.0 * mu).powi(3);
    let mut lo = 0.0;
    let mut hi = ((xj * xj / a - xk) / a).max(0.0) + 1e-300;
    while phi(hi) < 0.0 {
        hi = 2.0 * hi + 1e-12;
    }
    let mut mu = 0.5 * (lo + hi);
    let scale = a * a + xj * xj + (a * xk).abs();
    for _ in 0..100 {
        let f = phi(mu);
        if f.abs() <= 1e-15 * scale || hi - lo <= 1e-16 * hi {
            let wj = xj / (1.0 + 2.0 * mu);
            let wk = (wj * wj / a).max(xk + mu * a);
            return Ok((wj, wk));
        }
        if f < 0.0 {
            lo = mu;
        } else {
            hi = mu;
        }
        let step = mu - f / dphi(mu);
        mu = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
    }
    let res = phi(mu);
    if res.abs() <= 1e-10 * scale {
        let wj = xj / (1.0 + 2.0 * mu);
        return Ok((wj, (wj * wj / a).max(xk + mu * a)));
    }
    Err(Error::NonConvergence {
        what: "parabolic projection",
        detail: format!("multiplier residual {res:e} after 100 iterations"),
        candidates: vec![vec![mu]],
    })
}

fn uniform_in_ball<R: Rng + ?Sized>(pinned: &[bool], radius: f64, rng: &mut R) -> Vec<f64> {
    let free = pinned.iter().filter(|p| !**p).count().max(1);
    let mut u: Vec<f64> = pinned
        .iter()
        .map(|p| if *p { 0.0 } else { sample_normal(rng) })
        .collect();
    let n = norm(&u);
    let r = radius * rng.gen::<f64>().powf(1.0 / free as f64);
    if n > 0.0 {
        u.iter_mut().for_each(|x| *x *= r / n);
    }
    u
}

/// Set U_T = {u : θ* + a_T u ∈ Θ}.
pub fn build_finite_t(theta_star: &[f64], rate: &RateSchedule, t: f64, space: &ThetaSpace) -> Result<LocalSet> {
    space.validate()?;
    check_dim(space.dim(), theta_star.len())?;
    check_dim(rate.dim(), theta_star.len())?;
    if !space.contains(theta_star) {
        return Err(Error::domain("θ* lies outside Θ"));
    }
    let s = LocalSet::FiniteShift {
        theta_star: theta_star.to_vec(),
        rate: rate.clone(),
        t,
        space: space.clone(),
    };
    s.validate()?;
    Ok(s)
}

/// {u ∈ F : f_k(u) ≥ 0 for all k}.
pub fn explicit_u_from_constraints(
    base: LocalSet,
    constraints: Vec<QuadraticConstraint>,
    plus: Vec<usize>,
) -> Result<LocalSet> {
    let s = LocalSet::HalfSpaceSystem {
        base: Box::new(base),
        constraints,
        plus,
    };
    s.validate()?;
    Ok(s)
}

/// Limit set of (D11, D12, D22) around D* = diag(D11*, 0) when D12 scales
/// as n^(−1/2) and D22 as n^(−ρ/2), ρ = r/q ∨ 1. The constraint on R × R × [0, ∞)
/// is D11*·w3 ≥ 0 for q > r/2, D11*·w3 − w2² ≥ 0 for q = r/2 and −w2² ≥ 0 for
/// q < r/2.
pub fn covariance_corner_set(d11_star: f64, q: f64, r: f64) -> Result<LocalSet> {
    if !(d11_star > 0.0) || !(q > 0.0 && q <= 1.0) || !(0.0..=1.0).contains(&r) {
        return Err(Error::domain("need D11* > 0, 0 < q ≤ 1, 0 ≤ r ≤ 1"));
    }
    let base = LocalSet::box_cone(vec![Side::Free, Side::Free, Side::NonNeg]);
    let half = r / 2.0;
    let (constraint, plus) = if (q - half).abs() <= 1e-12 {
        (
            QuadraticConstraint {
                constant: 0.0,
                linear: vec![(2, d11_star)],
                quadratic: vec![(1, 1, -1.0)],
            },
            vec![],
        )
    } else if q > half {
        (
            QuadraticConstraint {
                constant: 0.0,
                linear: vec![(2, d11_star)],
                quadratic: vec![],
            },
            vec![],
        )
    } else {
        (
            QuadraticConstraint {
                constant: 0.0,
                linear: vec![],
                quadratic: vec![(1, 1, -1.0)],
            },
            vec![0],
        )
    };
    explicit_u_from_constraints(base, vec![constraint], plus)
}

/// Directed gap: the largest distance from sampled points of a ∩ B_R to b ∩ B_R.
///
/// Distances to b use its projection when one exists (for the convex sets
/// containing the origin built here, the projection of a point of B_R stays
/// in B_R); otherwise a sampled cloud of b ∩ B_R stands in.
pub fn hausdorff_gap<R: Rng + ?Sized>(
    a: &LocalSet,
    b: &LocalSet,
    radius: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    let pts = a.sample_in_ball(radius, n_samples, n_samples.saturating_mul(2000), rng);
    if pts.is_empty() {
        return Err(Error::DegenerateSampling("no sample point found in a ∩ B_R".into()));
    }
    let mut cloud: Option<Vec<Vec<f64>>> = None;
    let mut gap = 0.0f64;
    for x in &pts {
        let d = match b.distance(x)? {
            Some(d) => d,
            None => {
                let c = cloud
                    .get_or_insert_with(|| b.sample_in_ball(radius, n_samples, n_samples.saturating_mul(2000), rng));
                if c.is_empty() {
                    return Err(Error::DegenerateSampling("no sample point found in b ∩ B_R".into()));
                }
                c.iter().map(|y| dist(x, y)).fold(f64::INFINITY, f64::min)
            }
        };
        gap = gap.max(d);
    }
    Ok(gap)
}

/// Sampled check that t·u stays in the set for t ∈ {0.5, 2, 10}.
pub fn is_cone<R: Rng + ?Sized>(set: &LocalSet, n_samples: usize, rng: &mut R) -> bool {
    let pts = set.sample_in_ball(1.0, n_samples, n_samples.saturating_mul(1000), rng);
    pts.iter().all(|u| {
        [0.5, 2.0, 10.0].iter().all(|t| {
            let v: Vec<f64> = u.iter().map(|x| t * x).collect();
            set.contains_unchecked(&v)
        })
    })
}

/// Index sets entering the selection-geometry ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionGeometry {
    /// coordinates whose true value is zero (J0)
    pub zero: Vec<usize>,
    /// J0 coordinates carrying a positive power penalty, with exponent q_k
    pub penalized: Vec<(usize, f64)>,
    /// J0 coordinates with unit rate exponent ρ_k = 1
    pub unit_rate: Vec<usize>,
}

/// Sampled sup over u ∈ S(R, δ) of inf over v ∈ I(R) of
/// (|ū − v̄| + |u_unit|) / Σ |u_k|^q_k.
///
/// Points of S(R, δ) are drawn with the zero block uniform in (0, δ] and the
/// remaining block both uniform in B_R and pushed to the boundary along its
/// ray. Candidates for v are ū with subsets of its coordinates zeroed and
/// radially shrunk copies; the inf is taken over the feasible ones.
pub fn selection_geometry_ratio<R: Rng + ?Sized>(
    set_t: &LocalSet,
    radius: f64,
    delta: f64,
    geom: &SelectionGeometry,
    n_samples: usize,
    rng: &mut R,
) -> Result<f64> {
    if set_t.is_limit_kind() {
        return Err(Error::domain("selection geometry needs a finite-T set"));
    }
    let p = set_t.dim();
    let in_zero: Vec<bool> = (0..p).map(|j| geom.zero.contains(&j)).collect();
    let rest: Vec<usize> = (0..p).filter(|j| !in_zero[*j]).collect();
    if rest.len() > 12 {
        return Err(Error::Unsupported("too many free coordinates".into()));
    }
    let mut best = f64::NEG_INFINITY;
    let mut found = 0usize;
    let mut attempts = 0usize;
    while found < n_samples && attempts < n_samples.saturating_mul(200) {
        attempts += 1;
        let mut u = vec![0.0; p];
        for &k in &geom.zero {
            let mag = delta * (1.0 - rng.gen::<f64>());
            u[k] = if rng.gen::<bool>() { mag } else { -mag };
        }
        let mut dir: Vec<f64> = rest.iter().map(|_| sample_normal(rng)).collect();
        let dn = norm(&dir).max(1e-300);
        dir.iter_mut().for_each(|x| *x /= dn);
        let r0 = radius * rng.gen::<f64>().powf(1.0 / rest.len().max(1) as f64);
        let mut candidates = Vec::with_capacity(2);
        let place = |u: &mut Vec<f64>, r: f64| {
            for (i, &j) in rest.iter().enumerate() {
                u[j] = r * dir[i];
            }
        };
        place(&mut u, r0);
        if set_t.contains_unchecked(&u) {
            candidates.push(u.clone());
        }
        // boundary point along the ray, if the ray starts inside
        place(&mut u, 0.0);
        if set_t.contains_unchecked(&u) {
            let (mut lo, mut hi) = (0.0, radius);
            place(&mut u, hi);
            if set_t.contains_unchecked(&u) {
                lo = hi;
            } else {
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    place(&mut u, mid);
                    if set_t.contains_unchecked(&u) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
            }
            place(&mut u, lo);
            candidates.push(u.clone());
        }
        for u in candidates {
            found += 1;
            let denom: f64 = geom.penalized.iter().map(|&(k, q)| u[k].abs().powf(q)).sum();
            if denom <= 0.0 {
                continue;
            }
            let unit: f64 = geom.unit_rate.iter().map(|&k| u[k] * u[k]).sum::<f64>().sqrt();
            let inf = nearest_zero_section(set_t, &u, &rest, radius);
            let Some(inf) = inf else { continue };
            best = best.max((inf + unit) / denom);
        }
    }
    if found == 0 {
        return Err(Error::DegenerateSampling("S(R, δ) produced no points".into()));
    }
    Ok(best.max(0.0))
}

fn nearest_zero_section(set_t: &LocalSet, u: &[f64], rest: &[usize], radius: f64) -> Option<f64> {
    let p = u.len();
    let m = rest.len();
    let mut best: Option<f64> = None;
    let mut v = vec![0.0; p];
    let ubar: Vec<f64> = rest.iter().map(|&j| u[j]).collect();
    let mut consider = |vbar: &[f64]| {
        if norm(vbar) > radius * (1.0 + 1e-12) {
            return;
        }
        v.iter_mut().for_each(|x| *x = 0.0);
        for (i, &j) in rest.iter().enumerate() {
            v[j] = vbar[i];
        }
        if set_t.contains_unchecked(&v) {
            let d = dist(&ubar, vbar);
            best = Some(best.map_or(d, |b: f64| b.min(d)));
        }
    };
    for mask in 0u32..(1u32 << m) {
        let vbar: Vec<f64> = (0..m)
            .map(|i| if mask & (1 << i) != 0 { 0.0 } else { ubar[i] })
            .collect();
        consider(&vbar);
    }
    for s in 1..20 {
        let f = 1.0 - s as f64 / 20.0;
        let vbar: Vec<f64> = ubar.iter().map(|x| f * x).collect();
        consider(&vbar);
    }
    best
}
