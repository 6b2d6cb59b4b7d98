//! Small one- and two-dimensional solvers shared by the estimators.

/// argmin over x in [lo, hi] of ½(x − v)² + tau·|x|^q, q in (0, 1].
///
/// For q < 1 the candidates are 0, the interval ends and the larger root of
/// x + tau·q·x^(q−1) = |v|; the smallest objective wins and ties go to 0.
pub fn bridge_prox(v: f64, tau: f64, q: f64, lo: f64, hi: f64) -> f64 {
    if tau <= 0.0 {
        return v.clamp(lo, hi);
    }
    if q >= 1.0 {
        let s = v.signum() * (v.abs() - tau).max(0.0);
        return s.clamp(lo, hi);
    }
    let obj = |x: f64| 0.5 * (x - v) * (x - v) + tau * x.abs().powf(q);
    let mut cands: Vec<f64> = Vec::with_capacity(4);
    if lo <= 0.0 && hi >= 0.0 {
        cands.push(0.0);
    }
    if lo.is_finite() {
        cands.push(lo);
    }
    if hi.is_finite() {
        cands.push(hi);
    }
    if let Some(r) = bridge_root(v.abs(), tau, q) {
        cands.push((v.signum() * r).clamp(lo, hi));
    }
    let mut best = cands[0];
    let mut best_val = obj(best);
    for &c in &cands[1..] {
        let f = obj(c);
        if f < best_val || (f == best_val && c == 0.0) {
            best = c;
            best_val = f;
        }
    }
    best
}

/// Larger positive root of x + tau·q·x^(q−1) = a, if any.
fn bridge_root(a: f64, tau: f64, q: f64) -> Option<f64> {
    if a <= 0.0 {
        return None;
    }
    let h = |x: f64| x + tau * q * x.powf(q - 1.0) - a;
    let x_min = (tau * q * (1.0 - q)).powf(1.0 / (2.0 - q));
    if h(x_min) > 0.0 {
        return None;
    }
    let (mut lo, mut hi) = (x_min, a);
    // h is convex and increasing on [x_min, ∞); Newton from the right converges monotonically
    let mut x = hi;
    for _ in 0..200 {
        let f = h(x);
        if f.abs() <= 1e-15 * a {
            return Some(x);
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = 1.0 - tau * q * (1.0 - q) * x.powf(q - 2.0);
        let nx = if d > 0.0 { x - f / d } else { f64::NAN };
        x = if nx > lo && nx < hi { nx } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    Some(x)
}

/// Minimiser of a unimodal function on [a, b] by golden-section search.
pub fn golden_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
        if (b - a).abs() <= 1e-15 * (1.0 + a.abs()) {
            break;
        }
    }
    0.5 * (a + b)
}

/// Prox of (w_j, w_k) under a·w_k ≥ w_j², w_k ≥ 0, with an optional penalty
/// tau·|w_k|^q and per-coordinate metric weights.
///
/// Minimises ½m_j(w_j − v_j)² + ½m_k(w_k − v_k)² + tau·w_k^q. For fixed
/// w_k = s the best w_j clips v_j to [−√(as), √(as)], which leaves a
/// one-dimensional search over s; it is scanned on a grid, refined by
/// golden-section search and compared against s = 0.
pub fn parabolic_prox(a: f64, vj: f64, vk: f64, weights: (f64, f64), tau: f64, q: f64) -> (f64, f64) {
    let (mj, mk) = weights;
    let h = |s: f64| {
        let r = (a * s).sqrt();
        let wj = vj.clamp(-r, r);
        0.5 * mj * (wj - vj).powi(2) + 0.5 * mk * (s - vk).powi(2) + tau * s.powf(q)
    };
    let hi = (vk.max(0.0) + vj * vj / a).max(1e-300) * 1.5;
    let n = 200;
    let mut best_s = 0.0;
    let mut best_v = h(0.0);
    let mut best_i = 0usize;
    for i in 1..=n {
        let s = hi * i as f64 / n as f64;
        let v = h(s);
        if v < best_v {
            best_v = v;
            best_s = s;
            best_i = i;
        }
    }
    if best_i > 0 {
        let a0 = hi * (best_i - 1) as f64 / n as f64;
        let b0 = hi * ((best_i + 1).min(n)) as f64 / n as f64;
        let s = golden_min(h, a0, b0, 200);
        let v = h(s);
        if v <= best_v {
            best_s = s;
            best_v = v;
        }
        if h(0.0) <= best_v {
            best_s = 0.0;
        }
    }
    let r = (a * best_s).sqrt();
    (vj.clamp(-r, r), best_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_prox(v: f64, tau: f64, q: f64, lo: f64, hi: f64) -> f64 {
        let mut best = (f64::INFINITY, 0.0);
        let n = 200_000;
        for i in 0..=n {
            let x = lo + (hi - lo) * i as f64 / n as f64;
            let f = 0.5 * (x - v) * (x - v) + tau * x.abs().powf(q);
            if f < best.0 {
                best = (f, x);
            }
        }
        best.1
    }

    #[test]
    fn soft_threshold() {
        assert_eq!(bridge_prox(2.0, 0.5, 1.0, f64::NEG_INFINITY, f64::INFINITY), 1.5);
        assert_eq!(bridge_prox(-0.3, 0.5, 1.0, f64::NEG_INFINITY, f64::INFINITY), 0.0);
        assert_eq!(bridge_prox(-2.0, 0.5, 1.0, 0.0, f64::INFINITY), 0.0);
    }

    #[test]
    fn bridge_prox_matches_grid() {
        for &(v, tau, q) in &[(1.3, 0.4, 0.5), (0.6, 0.4, 0.5), (-2.2, 1.0, 0.3), (3.0, 2.0, 0.7)] {
            let x = bridge_prox(v, tau, q, -5.0, 5.0);
            let g = grid_prox(v, tau, q, -5.0, 5.0);
            assert!((x - g).abs() < 1e-4, "{v} {tau} {q}: {x} vs {g}");
        }
    }

    #[test]
    fn small_inputs_snap_to_exact_zero() {
        assert_eq!(bridge_prox(0.2, 0.5, 0.5, -1.0, 1.0), 0.0);
    }

    #[test]
    fn parabolic_prox_without_penalty_is_projection() {
        let (wj, wk) = parabolic_prox(1.0, 1.0, 0.0, (1.0, 1.0), 0.0, 1.0);
        let (pj, pk) = crate::localsets::project_parabola(1.0, 1.0, 0.0).unwrap();
        assert!((wj - pj).abs() < 1e-6 && (wk - pk).abs() < 1e-6);
    }
}
