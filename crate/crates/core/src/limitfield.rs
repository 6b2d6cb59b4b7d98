//! Limit log-fields Δ·g(u) − ½Γ[g(u)⊗2] − penalties, their random draws and
//! maximisers over a limit set.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{cholesky_lower, max_eigenvalue, min_eigenvalue, SymHalfVec};
use crate::localsets::{LocalSet, Side};
use crate::opt::{bridge_prox, parabolic_prox};
use crate::seed::{derive_seed, rng_for, SimRng};
use crate::specfun::sample_normal;

/// The map g applied to u before the quadratic form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "arg", rename_all = "kebab-case")]
pub enum PreMap {
    Identity,
    /// g(u) = u with coordinate j replaced by u_j²
    SquareAt(usize),
    /// g(u) = Bu with B diagonal 0/1; `true` keeps the coordinate
    Mask(Vec<bool>),
}

/// Produces one positive definite Γ realisation per draw.
pub trait GammaGenerator: Send + Sync {
    fn dim(&self) -> usize;
    fn generate(&self, rng: &mut SimRng) -> Result<DMatrix<f64>>;
}

#[derive(Clone)]
pub enum GammaSource {
    Fixed(DMatrix<f64>),
    Generator(Arc<dyn GammaGenerator>),
}

impl fmt::Debug for GammaSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GammaSource::Fixed(g) => f.debug_tuple("Fixed").field(g).finish(),
            GammaSource::Generator(g) => write!(f, "Generator(dim = {})", g.dim()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearPenalty {
    pub index: usize,
    pub coef: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerPenalty {
    pub index: usize,
    pub coef: f64,
    pub exponent: f64,
}

#[derive(Clone, Debug)]
pub struct LimitFieldSpec {
    dim: usize,
    pre_map: PreMap,
    gamma: GammaSource,
    linear: Vec<LinearPenalty>,
    power: Vec<PowerPenalty>,
    domain: LocalSet,
}

impl LimitFieldSpec {
    pub fn new(
        dim: usize,
        pre_map: PreMap,
        gamma: GammaSource,
        linear: Vec<LinearPenalty>,
        power: Vec<PowerPenalty>,
        domain: LocalSet,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if dim == 0 {
            return bad("dimension must be positive".into());
        }
        if domain.dim() != dim {
            return bad(format!("domain has dimension {}, field {dim}", domain.dim()));
        }
        if !domain.is_limit_kind() {
            return bad("domain must be a limit set".into());
        }
        domain.validate().map_err(|e| Error::InvalidSpec(e.to_string()))?;
        match &pre_map {
            PreMap::Identity => {}
            PreMap::SquareAt(j) if *j < dim => {}
            PreMap::SquareAt(j) => return bad(format!("squared index {j} out of range")),
            PreMap::Mask(m) if m.len() == dim => {}
            PreMap::Mask(m) => return bad(format!("mask length {} != {dim}", m.len())),
        }
        match &gamma {
            GammaSource::Fixed(g) => {
                if g.nrows() != dim || g.ncols() != dim {
                    return bad(format!("Γ is {}×{}, expected {dim}×{dim}", g.nrows(), g.ncols()));
                }
                if (g - g.transpose()).amax() > 1e-10 * (1.0 + g.amax()) {
                    return bad("Γ must be symmetric".into());
                }
                if min_eigenvalue(g) < -1e-10 * (1.0 + g.amax()) {
                    return bad("Γ must be positive semidefinite".into());
                }
            }
            GammaSource::Generator(gen) => {
                if gen.dim() != dim {
                    return bad(format!("generator dimension {} != {dim}", gen.dim()));
                }
            }
        }
        for l in &linear {
            if l.index >= dim || !(l.coef >= 0.0) {
                return bad(format!("bad linear penalty {l:?}"));
            }
        }
        for p in &power {
            if p.index >= dim || !(p.coef >= 0.0) || !(p.exponent > 0.0 && p.exponent <= 1.0) {
                return bad(format!("bad power penalty {p:?}"));
            }
        }
        if let PreMap::Mask(m) = &pre_map {
            for (k, keep) in m.iter().enumerate() {
                if !keep && !power.iter().any(|p| p.index == k && p.coef > 0.0) {
                    return bad(format!(
                        "masked coordinate {k} needs a power penalty with positive coefficient"
                    ));
                }
            }
        }
        if let PreMap::SquareAt(j) = pre_map {
            if linear.iter().any(|l| l.index == j) {
                return bad("linear penalty on the squared coordinate".into());
            }
        }
        Ok(Self {
            dim,
            pre_map,
            gamma,
            linear,
            power,
            domain,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pre_map(&self) -> &PreMap {
        &self.pre_map
    }

    pub fn domain(&self) -> &LocalSet {
        &self.domain
    }

    pub fn gamma_source(&self) -> &GammaSource {
        &self.gamma
    }

    pub fn linear_penalties(&self) -> &[LinearPenalty] {
        &self.linear
    }

    pub fn power_penalties(&self) -> &[PowerPenalty] {
        &self.power
    }

    fn kept(&self, k: usize) -> bool {
        match &self.pre_map {
            PreMap::Mask(m) => m[k],
            _ => true,
        }
    }

    /// g(u).
    pub fn apply_pre_map(&self, u: &[f64]) -> Vec<f64> {
        let mut g = u.to_vec();
        match &self.pre_map {
            PreMap::Identity => {}
            PreMap::SquareAt(j) => g[*j] = u[*j] * u[*j],
            PreMap::Mask(m) => g.iter_mut().zip(m).filter(|(_, k)| !**k).for_each(|(x, _)| *x = 0.0),
        }
        g
    }
}

/// One realisation of (Γ, Δ).
#[derive(Clone, Debug, PartialEq)]
pub struct FieldDraw {
    pub gamma: DMatrix<f64>,
    pub delta: DVector<f64>,
}

/// Γ from the field's source and Δ ~ N(0, Γ) given Γ.
pub fn draw(spec: &LimitFieldSpec, rng: &mut SimRng) -> Result<FieldDraw> {
    let gamma = match &spec.gamma {
        GammaSource::Fixed(g) => g.clone(),
        GammaSource::Generator(gen) => gen.generate(rng)?,
    };
    check_dim(spec.dim * spec.dim, gamma.len())?;
    let l = cholesky_lower(&gamma).ok_or_else(|| {
        Error::NotPositiveDefinite(format!("Γ realisation, min eigenvalue {:e}", min_eigenvalue(&gamma)))
    })?;
    let z = DVector::from_fn(spec.dim, |_, _| sample_normal(rng));
    let delta = l * z;
    Ok(FieldDraw { gamma, delta })
}

/// log Z(u).
pub fn log_field(spec: &LimitFieldSpec, d: &FieldDraw, u: &[f64]) -> f64 {
    let g = DVector::from_vec(spec.apply_pre_map(u));
    let mut v = d.delta.dot(&g) - 0.5 * g.dot(&(&d.gamma * &g));
    for l in &spec.linear {
        v -= l.coef * u[l.index];
    }
    for p in &spec.power {
        v -= p.coef * u[p.index].abs().powf(p.exponent);
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArgmaxOptions {
    /// extra random starts, used when some penalty exponent is below 1
    pub random_starts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for ArgmaxOptions {
    fn default() -> Self {
        Self {
            random_starts: 6,
            max_iter: 5000,
            seed: 0,
        }
    }
}

/// Prox block of the working problem.
#[derive(Clone, Debug)]
enum Block {
    Coord { i: usize, lo: f64, hi: f64 },
    Parab { j: usize, k: usize, a: f64 },
    Cone { start: usize, order: usize, set: LocalSet },
}

/// Minimise ½w′Qw − b′w + Σ d_k|w_k|^q_k over the blocks' constraint set,
/// where w = g(u) coordinatewise.
struct Work {
    q: DMatrix<f64>,
    b: DVector<f64>,
    pen: Vec<Option<(f64, f64)>>,
    blocks: Vec<Block>,
    metric: Vec<f64>,
    lip: f64,
}

impl Work {
    fn objective(&self, w: &DVector<f64>) -> f64 {
        let mut f = 0.5 * w.dot(&(&self.q * w)) - self.b.dot(w);
        for (x, p) in w.iter().zip(&self.pen) {
            if let Some((d, q)) = p {
                f += d * x.abs().powf(*q);
            }
        }
        f
    }

    fn grad(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.q * w - &self.b
    }

    /// Metric-weighted prox of the nonsmooth part at v with step 1/lip.
    fn prox(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = v.clone();
        for blk in &self.blocks {
            match blk {
                Block::Coord { i, lo, hi } => {
                    let i = *i;
                    out[i] = match self.pen[i] {
                        Some((d, q)) => bridge_prox(v[i], d / (self.lip * self.metric[i]), q, *lo, *hi),
                        None => v[i].clamp(*lo, *hi),
                    };
                }
                Block::Parab { j, k, a } => {
                    let (tau, q) = self.pen[*k].unwrap_or((0.0, 1.0));
                    let (wj, wk) = parabolic_prox(
                        *a,
                        v[*j],
                        v[*k],
                        (self.lip * self.metric[*j], self.lip * self.metric[*k]),
                        tau,
                        q,
                    );
                    out[*j] = wj;
                    out[*k] = wk;
                }
                Block::Cone { start, order, set } => {
                    let n = SymHalfVec::len_for(*order);
                    let part: Vec<f64> = v.rows(*start, n).iter().cloned().collect();
                    let p = set.project(&part).expect("cone projection");
                    for (t, x) in p.into_iter().enumerate() {
                        out[start + t] = x;
                    }
                }
            }
        }
        out
    }

    /// Coordinates whose optimal value is 0 whatever the rest: those
    /// constrained to {0}, and penalised coordinates absent from the smooth
    /// part whose interval contains 0.
    fn pinned(&self) -> Vec<bool> {
        let mut out = vec![false; self.b.len()];
        for blk in &self.blocks {
            if let Block::Coord { i, lo, hi } = blk {
                let i = *i;
                let zero_set = *lo == 0.0 && *hi == 0.0;
                let detached = self.pen[i].is_some()
                    && self.b[i] == 0.0
                    && self.q.row(i).iter().all(|&v| v == 0.0)
                    && *lo <= 0.0
                    && *hi >= 0.0;
                out[i] = zero_set || detached;
            }
        }
        out
    }

    fn box_only(&self) -> bool {
        self.blocks.iter().all(|b| matches!(b, Block::Coord { .. }))
    }

    /// Proximal gradient with monotone acceleration and restarts.
    fn fista(&self, start: DVector<f64>, max_iter: usize) -> DVector<f64> {
        let mut x = self.prox(&start);
        let mut fx = self.objective(&x);
        let mut y = x.clone();
        let mut t = 1.0f64;
        let minv = DVector::from_iterator(self.metric.len(), self.metric.iter().map(|m| 1.0 / m));
        for _ in 0..max_iter {
            let g = self.grad(&y);
            let z = self.prox(&(&y - g.component_mul(&minv) / self.lip));
            let fz = self.objective(&z);
            let moved = (&z - &y).norm();
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let x_prev = x.clone();
            if fz <= fx {
                x = z.clone();
                fx = fz;
                y = &x + (&x - &x_prev) * ((t - 1.0) / t_next);
                t = t_next;
            } else if t == 1.0 {
                // a plain prox-gradient step from the best point no longer
                // descends: converged to rounding
                break;
            } else {
                // restart from the best point
                y = x.clone();
                t = 1.0;
            }
            if moved <= 1e-12 * (1.0 + y.norm()) {
                break;
            }
        }
        x
    }

    /// Newton refinement on the coordinates that are free at w.
    fn polish(&self, w: DVector<f64>) -> DVector<f64> {
        if !self.box_only() {
            return w;
        }
        let mut w = w;
        let mut fw = self.objective(&w);
        for _ in 0..30 {
            let mut free = Vec::new();
            let mut bounds = Vec::new();
            for blk in &self.blocks {
                if let Block::Coord { i, lo, hi } = blk {
                    let x = w[*i];
                    let inside = x > *lo && x < *hi;
                    let pen_zero = self.pen[*i].is_some() && x == 0.0;
                    if inside && !pen_zero {
                        free.push(*i);
                        bounds.push((*lo, *hi));
                    }
                }
            }
            if free.is_empty() {
                break;
            }
            let m = free.len();
            let g = self.grad(&w);
            let mut gf = DVector::zeros(m);
            let mut h = DMatrix::zeros(m, m);
            for (a, &i) in free.iter().enumerate() {
                gf[a] = g[i];
                for (c, &j) in free.iter().enumerate() {
                    h[(a, c)] = self.q[(i, j)];
                }
                if let Some((d, q)) = self.pen[i] {
                    let x = w[i];
                    gf[a] += d * q * x.abs().powf(q - 1.0) * x.signum();
                    h[(a, a)] += d * q * (q - 1.0) * x.abs().powf(q - 2.0);
                }
            }
            let Some(step) = h.clone().cholesky().map(|c| c.solve(&gf)) else {
                break;
            };
            let mut next = w.clone();
            let mut ok = true;
            for (a, &i) in free.iter().enumerate() {
                let x = w[i] - step[a];
                let (lo, hi) = bounds[a];
                if x < lo || x > hi || (self.pen[i].is_some() && x.signum() != w[i].signum()) {
                    ok = false;
                }
                next[i] = x;
            }
            if !ok {
                break;
            }
            let fnext = self.objective(&next);
            if !(fnext <= fw) {
                break;
            }
            let change = (&next - &w).norm();
            w = next;
            fw = fnext;
            if change <= 1e-15 * (1.0 + w.norm()) {
                break;
            }
        }
        w
    }
}

fn collect_blocks(set: &LocalSet, offset: usize, out: &mut Vec<Block>) -> Result<()> {
    match set {
        LocalSet::BoxCone { sides } => {
            for (t, s) in sides.iter().enumerate() {
                let (lo, hi) = s.interval();
                out.push(Block::Coord { i: offset + t, lo, hi });
            }
        }
        LocalSet::Parabolic {
            sides,
            square_index,
            linear_index,
            curvature,
        } => {
            for (t, s) in sides.iter().enumerate() {
                if t != *square_index && t != *linear_index {
                    let (lo, hi) = s.interval();
                    out.push(Block::Coord { i: offset + t, lo, hi });
                }
            }
            out.push(Block::Parab {
                j: offset + square_index,
                k: offset + linear_index,
                a: *curvature,
            });
        }
        LocalSet::PsdTangentCone { order, kernel } => {
            let n = SymHalfVec::len_for(*order);
            if kernel.is_empty() {
                for t in 0..n {
                    out.push(Block::Coord {
                        i: offset + t,
                        lo: f64::NEG_INFINITY,
                        hi: f64::INFINITY,
                    });
                }
                return Ok(());
            }
            if kernel.len() == 1 {
                // a half-space whose normal is a coordinate axis is a box cone
                let kv = &kernel[0];
                let nz: Vec<usize> = (0..*order).filter(|&i| kv[i].abs() > 1e-14).collect();
                if nz.len() == 1 {
                    let diag = SymHalfVec::index_of(*order, nz[0], nz[0]);
                    for t in 0..n {
                        let lo = if t == diag { 0.0 } else { f64::NEG_INFINITY };
                        out.push(Block::Coord {
                            i: offset + t,
                            lo,
                            hi: f64::INFINITY,
                        });
                    }
                    return Ok(());
                }
            }
            out.push(Block::Cone {
                start: offset,
                order: *order,
                set: set.clone(),
            });
        }
        LocalSet::Product { parts } => {
            let mut off = offset;
            for p in parts {
                collect_blocks(p, off, out)?;
                off += p.dim();
            }
        }
        LocalSet::HalfSpaceSystem { .. } => collect_blocks(&set.canonicalize()?, offset, out)?,
        LocalSet::FiniteShift { .. } => return Err(Error::InvalidSpec("argmax needs a limit set".into())),
    }
    Ok(())
}

fn build_work(spec: &LimitFieldSpec, d: &FieldDraw) -> Result<Work> {
    let p = spec.dim;
    check_dim(p, d.delta.len())?;
    let mut blocks = Vec::new();
    collect_blocks(&spec.domain, 0, &mut blocks)?;
    let square = match spec.pre_map {
        PreMap::SquareAt(j) => Some(j),
        _ => None,
    };
    if let Some(j) = square {
        // w_j = u_j² ranges over [0, ∞) whatever the sign constraint on u_j
        for blk in &mut blocks {
            match blk {
                Block::Coord { i, lo, hi } if *i == j => {
                    let side = if *lo == 0.0 && *hi == 0.0 {
                        Side::Zero
                    } else {
                        Side::NonNeg
                    };
                    (*lo, *hi) = side.interval();
                }
                Block::Parab { j: a, k: b, .. } if *a == j || *b == j => {
                    return Err(Error::Unsupported("squared coordinate inside a parabola".into()))
                }
                Block::Cone { start, order, .. } if (*start..*start + SymHalfVec::len_for(*order)).contains(&j) => {
                    return Err(Error::Unsupported("squared coordinate inside a PSD cone".into()))
                }
                _ => {}
            }
        }
    }
    let keep: Vec<f64> = (0..p).map(|k| if spec.kept(k) { 1.0 } else { 0.0 }).collect();
    let q = DMatrix::from_fn(p, p, |i, j| {
        keep[i] * keep[j] * 0.5 * (d.gamma[(i, j)] + d.gamma[(j, i)])
    });
    let mut b = DVector::from_fn(p, |i, _| keep[i] * d.delta[i]);
    for l in &spec.linear {
        b[l.index] -= l.coef;
    }
    let mut pen: Vec<Option<(f64, f64)>> = vec![None; p];
    for pp in &spec.power {
        if pp.coef == 0.0 {
            continue;
        }
        let e = if square == Some(pp.index) {
            pp.exponent / 2.0
        } else {
            pp.exponent
        };
        if pen[pp.index].is_some() {
            return Err(Error::InvalidSpec(format!(
                "two power penalties on coordinate {}",
                pp.index
            )));
        }
        pen[pp.index] = Some((pp.coef, e));
    }
    for blk in &blocks {
        match blk {
            Block::Parab { j, .. } if pen[*j].is_some() => {
                return Err(Error::Unsupported(
                    "penalty on the squared coordinate of a parabola".into(),
                ))
            }
            Block::Cone { start, order, .. }
                if (*start..*start + SymHalfVec::len_for(*order)).any(|i| pen[i].is_some()) =>
            {
                return Err(Error::Unsupported("penalty inside a PSD tangent cone".into()));
            }
            _ => {}
        }
    }
    // coercivity on the kept coordinates
    let kept: Vec<usize> = (0..p).filter(|&k| spec.kept(k)).collect();
    if !kept.is_empty() {
        let sub = DMatrix::from_fn(kept.len(), kept.len(), |a, c| q[(kept[a], kept[c])]);
        let me = min_eigenvalue(&sub);
        if !(me > 1e-10) {
            return Err(Error::InvalidSpec(format!(
                "Γ is not positive definite on the kept coordinates (min eigenvalue {me:e})"
            )));
        }
    }
    let mut metric: Vec<f64> = (0..p).map(|i| if q[(i, i)] > 0.0 { q[(i, i)] } else { 1.0 }).collect();
    for blk in &blocks {
        if let Block::Cone { start, order, .. } = blk {
            let r = *start..*start + SymHalfVec::len_for(*order);
            let m = r.clone().map(|i| metric[i]).fold(0.0, f64::max);
            r.for_each(|i| metric[i] = m);
        }
    }
    let scaled = DMatrix::from_fn(p, p, |i, j| q[(i, j)] / (metric[i] * metric[j]).sqrt());
    let lip = max_eigenvalue(&scaled).max(1e-300) * (1.0 + 1e-10);
    Ok(Work {
        q,
        b,
        pen,
        blocks,
        metric,
        lip,
    })
}

fn to_u(spec: &LimitFieldSpec, w: &DVector<f64>) -> Vec<f64> {
    let mut u: Vec<f64> = w.iter().cloned().collect();
    if let PreMap::SquareAt(j) = spec.pre_map {
        u[j] = w[j].max(0.0).sqrt();
    }
    u
}

/// û = argmax of the log-field over the field's domain.
pub fn argmax(spec: &LimitFieldSpec, d: &FieldDraw, opts: &ArgmaxOptions) -> Result<Vec<f64>> {
    argmax_with_value(spec, d, opts).map(|(u, _)| u)
}

/// û together with log Z(û).
pub fn argmax_with_value(spec: &LimitFieldSpec, d: &FieldDraw, opts: &ArgmaxOptions) -> Result<(Vec<f64>, f64)> {
    let work = build_work(spec, d)?;
    let p = spec.dim;
    let pinned = work.pinned();
    let kept: Vec<usize> = (0..p).filter(|&k| spec.kept(k) && !pinned[k]).collect();
    // stationary point of the smooth part on the kept coordinates
    let mut w_free = DVector::zeros(p);
    if !kept.is_empty() {
        let sub = DMatrix::from_fn(kept.len(), kept.len(), |a, c| work.q[(kept[a], kept[c])]);
        let rhs = DVector::from_fn(kept.len(), |a, _| work.b[kept[a]]);
        let sol = sub
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("Γ on kept coordinates".into()))?
            .solve(&rhs);
        for (a, &k) in kept.iter().enumerate() {
            w_free[k] = sol[a];
        }
    }
    let active_pen = || {
        work.pen
            .iter()
            .zip(&pinned)
            .filter(|(_, &z)| !z)
            .filter_map(|(p, _)| *p)
    };
    let penalised = active_pen().next().is_some();
    if !penalised {
        let u = to_u(spec, &w_free);
        if spec.domain.contains(&u).unwrap_or(false) && work.prox(&w_free) == w_free {
            let v = log_field(spec, d, &u);
            return Ok((u, v));
        }
    }
    let nonconvex = active_pen().any(|(_, q)| q < 1.0);
    let mut starts = vec![DVector::zeros(p), w_free.clone()];
    if nonconvex {
        let mut rng = rng_for(opts.seed, "argmax-start", 0);
        let s = 1.0 + w_free.norm();
        for _ in 0..opts.random_starts {
            let z = DVector::from_fn(p, |i, _| if pinned[i] { 0.0 } else { sample_normal(&mut rng) });
            starts.push(&w_free + z * (s / (p as f64).sqrt()));
        }
    }
    let mut found: Vec<(f64, DVector<f64>)> = Vec::with_capacity(starts.len());
    for s in starts {
        let w = work.fista(s, opts.max_iter);
        let w = work.polish(w);
        found.push((work.objective(&w), w));
    }
    let best = found
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .map(|(i, _)| i)
        .expect("at least one start");
    let (fb, wb) = (found[best].0, found[best].1.clone());
    for (f, w) in &found {
        let same_value = (f - fb).abs() <= 1e-10 * (1.0 + fb.abs());
        let far = (w - &wb).norm() > 1e-4 * (1.0 + wb.norm());
        if same_value && far {
            return Err(Error::NonConvergence {
                what: "limit argmax",
                detail: format!("distinct maximisers with equal value {:.12e}", -fb),
                candidates: found.iter().map(|(_, w)| to_u(spec, w)).collect(),
            });
        }
    }
    let u = to_u(spec, &wb);
    let v = log_field(spec, d, &u);
    Ok((u, v))
}

/// Rows of û draws with their log-field values.
#[derive(Clone, Debug, PartialEq)]
pub struct LimitSample {
    pub rows: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

/// `n_draws` independent maximisers; draw i uses seeds derived from (seed, i).
pub fn simulate_limit(spec: &LimitFieldSpec, n_draws: usize, seed: u64) -> Result<LimitSample> {
    if n_draws == 0 {
        return Err(Error::domain("n_draws must be at least 1"));
    }
    let out: Vec<(Vec<f64>, f64)> = (0..n_draws)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(seed, "limit-draw", i as u64);
            let d = draw(spec, &mut rng).map_err(|e| e.in_rep(i))?;
            let opts = ArgmaxOptions {
                seed: derive_seed(seed, "limit-start", i as u64),
                ..ArgmaxOptions::default()
            };
            argmax_with_value(spec, &d, &opts).map_err(|e| e.in_rep(i))
        })
        .collect::<Result<_>>()?;
    let (rows, values) = out.into_iter().unzip();
    Ok(LimitSample { rows, values })
}
