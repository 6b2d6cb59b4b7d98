mod common;

use boundlim_core::gig::{
    gig_experiment, gig_limit_spec, gig_loglik, gig_logpdf, gig_mle, limit_covariance_c, sample_gamma_truth,
    sample_gig_inverse_cdf, scaled_estimate, GigBounds, GigExperimentConfig, GigParams, MleOptions,
};
use boundlim_core::seed::rng_for;
use common::{bessel_k_trapezoid, simpson};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

fn density_mass(p: &GigParams) -> f64 {
    // substitute x = e^s
    simpson(|s| (gig_logpdf(s.exp(), p).unwrap() + s).exp(), -40.0, 8.0, 400_000)
}

#[test]
fn density_integrates_to_one() {
    let mut rng = rng_for(31, "gig-norm", 0);
    for i in 0..10 {
        let lambda = rng.gen_range(2.1..8.0);
        let delta = if i < 3 { 0.0 } else { rng.gen_range(0.05..3.0) };
        let gamma = rng.gen_range(0.5..3.0);
        let p = GigParams::new(lambda, delta, gamma).unwrap();
        let m = density_mass(&p);
        assert!((m - 1.0).abs() < 1e-6, "{p:?}: mass {m}");
    }
}

#[test]
fn zero_delta_is_the_gamma_density() {
    let p = GigParams::new(3.0, 0.0, 1.2).unwrap();
    let rate: f64 = 0.72;
    for x in [0.1f64, 1.0, 4.0, 15.0] {
        let want = 3.0 * rate.ln() - 2f64.ln() + 2.0 * x.ln() - rate * x;
        assert!((gig_logpdf(x, &p).unwrap() - want).abs() < 1e-12);
    }
}

#[test]
fn density_uses_the_bessel_normaliser() {
    let p = GigParams::new(2.5, 0.8, 1.5).unwrap();
    let k = bessel_k_trapezoid(2.5, 1.2);
    let x: f64 = 0.9;
    let want = 2.5 * (1.5f64 / 0.8).ln() - (2.0 * k).ln() + 1.5 * x.ln() - 0.5 * (0.64 / x + 2.25 * x);
    assert!((gig_logpdf(x, &p).unwrap() - want).abs() < 1e-9);
}

#[test]
fn loglik_is_a_sum_of_log_densities() {
    let p = GigParams::new(4.0, 0.5, 1.1).unwrap();
    let data = [0.3, 1.7, 2.2, 5.0, 0.9];
    let direct: f64 = data.iter().map(|x| gig_logpdf(*x, &p).unwrap()).sum();
    assert!((gig_loglik(&data, &p).unwrap() - direct).abs() < 1e-9);
}

#[test]
fn inverse_cdf_sampler_matches_mean() {
    let p = GigParams::new(3.0, 1.0, 1.0).unwrap();
    let mut rng = rng_for(32, "gig-sampler", 0);
    let xs = sample_gig_inverse_cdf(&p, 100_000, &mut rng);
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    let want = bessel_k_trapezoid(4.0, 1.0) / bessel_k_trapezoid(3.0, 1.0);
    assert!((m - want).abs() < 4.0 * (v / xs.len() as f64).sqrt(), "{m} vs {want}");
}

/// Entrywise sample covariance of (log ξ, −½/ξ, −γξ) with ξ ~ Gamma(λ, γ²/2),
/// plus the standard error of each entry.
fn score_covariance_mc(lambda: f64, gamma: f64, n: usize) -> ([[f64; 3]; 3], [[f64; 3]; 3]) {
    let law = Gamma::new(lambda, 2.0 / (gamma * gamma)).unwrap();
    let mut rng = rng_for(33, "c-oracle", 0);
    let rows: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            let x: f64 = law.sample(&mut rng);
            [x.ln(), -0.5 / x, -gamma * x]
        })
        .collect();
    let mut mean = [0.0; 3];
    for r in &rows {
        for j in 0..3 {
            mean[j] += r[j] / n as f64;
        }
    }
    let mut cov = [[0.0; 3]; 3];
    let mut se = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let prods: Vec<f64> = rows.iter().map(|r| (r[i] - mean[i]) * (r[j] - mean[j])).collect();
            let m = prods.iter().sum::<f64>() / n as f64;
            let v = prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            cov[i][j] = m;
            se[i][j] = (v / n as f64).sqrt();
        }
    }
    (cov, se)
}

#[test]
fn limit_covariance_matches_monte_carlo() {
    for (lambda, gamma) in [(3.0, 1.0), (5.0, 0.7)] {
        let c = limit_covariance_c(lambda, gamma).unwrap();
        let (mc, se) = score_covariance_mc(lambda, gamma, 1_000_000);
        for i in 0..3 {
            for j in i..3 {
                let z = (c[(i, j)] - mc[i][j]) / se[i][j];
                assert!(
                    z.abs() < 3.0,
                    "λ={lambda} ({i},{j}): {} vs {} (z = {z:.2})",
                    c[(i, j)],
                    mc[i][j]
                );
            }
        }
    }
}

#[test]
fn limit_covariance_needs_lambda_above_two() {
    assert!(limit_covariance_c(2.0, 1.0).is_err());
    assert!(limit_covariance_c(3.0, 0.0).is_err());
    assert!(gig_limit_spec(1.5, 1.0).is_err());
}

#[test]
fn mle_stays_in_box_and_hits_zero_delta() {
    let bounds = GigBounds::default();
    let n = 4000;
    let mut zeros = 0;
    let reps = 100;
    for r in 0..reps {
        let mut rng = rng_for(34, "mle-box", r);
        let data = sample_gamma_truth(3.0, 1.0, n, &mut rng).unwrap();
        let est = gig_mle(&data, &bounds, &MleOptions::default()).unwrap();
        assert!(est.lambda >= bounds.lambda_lo && est.lambda <= bounds.lambda_hi);
        assert!(est.delta >= 0.0 && est.delta <= bounds.delta_hi);
        assert!(est.gamma >= bounds.gamma_lo && est.gamma <= bounds.gamma_hi);
        if est.delta <= 1e-10 {
            zeros += 1;
        }
    }
    assert!(zeros > 0 && zeros < reps, "zero count {zeros}");
}

#[test]
fn mle_beats_the_truth_and_nearby_points() {
    let bounds = GigBounds::default();
    let mut rng = rng_for(35, "mle-opt", 0);
    let data = sample_gamma_truth(3.0, 1.0, 2000, &mut rng).unwrap();
    let est = gig_mle(&data, &bounds, &MleOptions::default()).unwrap();
    let best = gig_loglik(&data, &est).unwrap();
    assert!(best >= gig_loglik(&data, &GigParams::new(3.0, 0.0, 1.0).unwrap()).unwrap());
    for _ in 0..200 {
        let p = GigParams::new(
            (est.lambda + rng.gen_range(-0.1..0.1)).clamp(bounds.lambda_lo, bounds.lambda_hi),
            (est.delta + rng.gen_range(-0.1..0.1)).clamp(0.0, bounds.delta_hi),
            (est.gamma + rng.gen_range(-0.05..0.05)).clamp(bounds.gamma_lo, bounds.gamma_hi),
        )
        .unwrap();
        assert!(gig_loglik(&data, &p).unwrap() <= best + 1e-8);
    }
}

#[test]
fn mle_recovers_an_interior_truth() {
    let truth = GigParams::new(3.0, 1.0, 1.0).unwrap();
    let mut rng = rng_for(36, "mle-interior", 0);
    let data = sample_gig_inverse_cdf(&truth, 50_000, &mut rng);
    let est = gig_mle(&data, &GigBounds::default(), &MleOptions::default()).unwrap();
    assert!((est.lambda - 3.0).abs() < 0.4, "{est:?}");
    assert!((est.delta - 1.0).abs() < 0.4, "{est:?}");
    assert!((est.gamma - 1.0).abs() < 0.2, "{est:?}");
}

#[test]
fn scaling_uses_quarter_rate_for_delta() {
    let est = GigParams::new(3.5, 0.2, 0.9).unwrap();
    let s = scaled_estimate(&est, 3.0, 1.0, 10_000);
    assert!((s[0] - 50.0).abs() < 1e-9);
    assert!((s[1] - 2.0).abs() < 1e-12);
    assert!((s[2] + 10.0).abs() < 1e-9);
}

#[test]
fn small_experiment_is_reproducible() {
    let cfg = GigExperimentConfig {
        lambda_star: 3.0,
        gamma_star: 1.0,
        bounds: GigBounds::default(),
        n_grid: vec![300],
        reps: 20,
        limit_draws: 200,
        seed: 5,
    };
    let a = gig_experiment(&cfg).unwrap();
    let b = gig_experiment(&cfg).unwrap();
    assert_eq!(a, b);
    let cell = &a.cells[0];
    assert_eq!(cell.reps, (0..20).collect::<Vec<_>>());
    assert!(cell.ks.iter().all(|k| (0.0..=1.0).contains(k)));
    assert!((0.0..=1.0).contains(&a.limit_zero_fraction));
}
