//! Special functions: modified Bessel K by quadrature, digamma, trigamma,
//! and thin sampling wrappers.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuadratureKind {
    LogSpacedTrapezoid,
    GaussLaguerreLike,
}

/// Nodes and weights for integrals over (0, ∞).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuadratureGrid {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub kind: QuadratureKind,
}

impl QuadratureGrid {
    /// Trapezoid rule in s = ln y over [ln lo, ln hi] with `n` nodes.
    pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if !(lo > 0.0 && hi > lo && n >= 2) {
            return Err(Error::domain("log-spaced grid needs 0 < lo < hi and n >= 2"));
        }
        let (a, b) = (lo.ln(), hi.ln());
        let h = (b - a) / (n - 1) as f64;
        let mut nodes = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for i in 0..n {
            let y = (a + h * i as f64).exp();
            let end = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            nodes.push(y);
            weights.push(end * h * y);
        }
        Ok(Self {
            nodes,
            weights,
            kind: QuadratureKind::LogSpacedTrapezoid,
        })
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&y, &w)| w * f(y)).sum()
    }
}

/// Trapezoid rule for ∫ exp(φ(s)) ds over the real line with φ concave,
/// stored relative to the peak value so that huge or tiny integrals stay
/// representable.
#[derive(Clone, Debug)]
pub(crate) struct PeakedRule {
    pub s: Vec<f64>,
    /// exp(φ(s) − φ(mode)) times the step length
    pub w: Vec<f64>,
    pub log_peak: f64,
}

impl PeakedRule {
    /// `mode` must maximise φ and `curv` be φ''(mode) < 0.
    pub fn build(phi: impl Fn(f64) -> f64, mode: f64, curv: f64) -> Self {
        const DROP: f64 = 46.0;
        let sigma = 1.0 / (-curv).max(1e-300).sqrt();
        let h = (sigma / 5.0).min(0.1);
        let peak = phi(mode);
        let mut left = Vec::new();
        let mut right = Vec::new();
        let mut k = 1usize;
        loop {
            let s = mode - h * k as f64;
            let r = phi(s) - peak;
            if !(r > -DROP) || k > 200_000 {
                break;
            }
            left.push((s, r));
            k += 1;
        }
        k = 1;
        loop {
            let s = mode + h * k as f64;
            let r = phi(s) - peak;
            if !(r > -DROP) || k > 200_000 {
                break;
            }
            right.push((s, r));
            k += 1;
        }
        let mut s = Vec::with_capacity(left.len() + right.len() + 1);
        let mut w = Vec::with_capacity(s.capacity());
        for &(x, r) in left.iter().rev() {
            s.push(x);
            w.push(h * r.exp());
        }
        s.push(mode);
        w.push(h);
        for &(x, r) in &right {
            s.push(x);
            w.push(h * r.exp());
        }
        Self { s, w, log_peak: peak }
    }

    pub fn log_integral(&self) -> f64 {
        self.log_peak + self.w.iter().sum::<f64>().ln()
    }
}

/// ln K_ν(x) for x > 0.
pub fn ln_bessel_k(nu: f64, x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("bessel_k needs x > 0, got {x}")));
    }
    if !nu.is_finite() {
        return Err(Error::domain("bessel_k needs a finite order"));
    }
    // K_ν(x) = ½ ∫ exp(νs − x cosh s) ds over the real line.
    let nu = nu.abs();
    let mode = (nu / x).asinh();
    let curv = -x * mode.cosh();
    let rule = PeakedRule::build(|s| nu * s - x * s.cosh(), mode, curv);
    Ok(rule.log_integral() - std::f64::consts::LN_2)
}

pub fn bessel_k(nu: f64, x: f64) -> Result<f64> {
    let l = ln_bessel_k(nu, x)?;
    if l > f64::MAX.ln() {
        return Err(Error::Overflow {
            what: "bessel_k",
            detail: format!("ln K_{nu}({x}) = {l:.3} exceeds f64 range"),
        });
    }
    Ok(l.exp())
}

pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("digamma needs x > 0, got {x}")));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    let series = r
        * (-1.0 / 12.0
            + r * (1.0 / 120.0
                + r * (-1.0 / 252.0
                    + r * (1.0 / 240.0 + r * (-1.0 / 132.0 + r * (691.0 / 32760.0 + r * (-1.0 / 12.0)))))));
    Ok(acc + x.ln() - 0.5 / x + series)
}

pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("trigamma needs x > 0, got {x}")));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let r = 1.0 / (x * x);
    let series = (1.0 / x)
        * (1.0
            + 0.5 / x
            + r * (1.0 / 6.0
                + r * (-1.0 / 30.0
                    + r * (1.0 / 42.0
                        + r * (-1.0 / 30.0 + r * (5.0 / 66.0 + r * (-691.0 / 2730.0 + r * 7.0 / 6.0)))))));
    Ok(acc + series)
}

pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Gamma(shape, rate) draw.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g =
        Gamma::new(shape, 1.0 / rate).map_err(|e| Error::domain(format!("gamma(shape={shape}, rate={rate}): {e}")))?;
    Ok(g.sample(rng))
}

pub fn sample_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn bessel_half_order_closed_form() {
        for &x in &[0.01, 0.3, 1.0, 4.0, 30.0] {
            let exact = (std::f64::consts::PI / (2.0 * x)).sqrt() * (-x).exp();
            let k = bessel_k(0.5, x).unwrap();
            assert!(((k - exact) / exact).abs() < 1e-13, "x={x}: {k} vs {exact}");
        }
        assert!((bessel_k(0.5, 1.0).unwrap() - 0.461_068_504_447_894_5).abs() < 1e-12);
    }

    #[test]
    fn bessel_rejects_nonpositive_argument() {
        assert!(matches!(bessel_k(1.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(bessel_k(1.0, -2.0), Err(Error::Domain(_))));
    }

    #[test]
    fn bessel_overflow_is_reported() {
        assert!(matches!(bessel_k(200.0, 1e-6), Err(Error::Overflow { .. })));
        assert!(ln_bessel_k(200.0, 1e-6).unwrap() > 709.0);
    }

    #[test]
    fn bessel_small_argument_order_one() {
        let x = 1e-6;
        let v = x * bessel_k(1.0, x).unwrap();
        assert!((v - 1.0).abs() < 1e-4);
    }

    #[test]
    fn digamma_trigamma_reference_values() {
        assert!((digamma(1.0).unwrap() + 0.577_215_664_901_532_9).abs() < 1e-13);
        assert!((trigamma(1.0).unwrap() - 1.644_934_066_848_226_4).abs() < 1e-13);
        assert!((trigamma(3.0).unwrap() - 0.394_934_066_848_226_4).abs() < 1e-13);
        assert!((digamma(4.0).unwrap() - digamma(3.0).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn recurrences_hold_on_range() {
        let mut x = 0.5;
        while x <= 50.0 {
            let d = digamma(x + 1.0).unwrap() - digamma(x).unwrap() - 1.0 / x;
            let t = trigamma(x).unwrap() - trigamma(x + 1.0).unwrap() - 1.0 / (x * x);
            assert!(d.abs() < 1e-12, "digamma recurrence at {x}: {d}");
            assert!(t.abs() < 1e-12, "trigamma recurrence at {x}: {t}");
            x += 0.37;
        }
    }

    #[test]
    fn log_grid_integrates_exponential() {
        let g = QuadratureGrid::log_spaced(1e-12, 80.0, 4000).unwrap();
        assert!(g.nodes.windows(2).all(|w| w[0] < w[1]));
        let v = g.integrate(|y| (-y).exp());
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gamma_sampler_moments() {
        let mut rng = rng_for(11, "gamma-test", 0);
        let n = 1_000_000;
        let xs: Vec<f64> = (0..n).map(|_| sample_gamma(3.0, 0.5, &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 6.0).abs() < 0.015, "mean {mean}");
        assert!((var - 12.0).abs() < 0.1, "var {var}");

        let mut rng = rng_for(11, "gamma-test", 1);
        let tail = (0..n)
            .filter(|_| sample_gamma(1.0, 1.0, &mut rng).unwrap() > 1.0)
            .count() as f64
            / n as f64;
        assert!((tail - (-1.0f64).exp()).abs() < 0.005);
    }

    #[test]
    fn samplers_are_seed_deterministic() {
        let mut a = rng_for(5, "s", 0);
        let mut b = rng_for(5, "s", 0);
        for _ in 0..50 {
            assert_eq!(
                sample_gamma(2.5, 1.5, &mut a).unwrap(),
                sample_gamma(2.5, 1.5, &mut b).unwrap()
            );
            assert_eq!(sample_normal(&mut a), sample_normal(&mut b));
        }
    }
}
