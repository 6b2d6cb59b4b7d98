//! Summary statistics used by the experiments.

use crate::error::{Error, Result};

/// Two-sample Kolmogorov–Smirnov statistic sup |F_a − F_b|.
pub fn ks_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::domain("ks_distance needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|x| x.is_nan()) {
        return Err(Error::domain("ks_distance got NaN"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

/// Fraction of entries exactly equal to zero.
pub fn zero_fraction(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().filter(|v| **v == 0.0).count() as f64 / x.len() as f64
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A replication that failed, kept so the others can still be reported.
#[derive(Clone, Debug, PartialEq)]
pub struct RepFailure {
    pub rep: usize,
    pub message: String,
}

/// Split per-replication results, in replication order, into successes
/// tagged with their index and failures.
pub fn split_outcomes<T>(results: Vec<Result<T>>) -> (Vec<(usize, T)>, Vec<RepFailure>) {
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for (rep, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push((rep, v)),
            Err(e) => failed.push(RepFailure {
                rep,
                message: e.to_string(),
            }),
        }
    }
    (ok, failed)
}

/// KS distance, NaN when either sample is empty.
pub fn ks_or_nan(a: &[f64], b: &[f64]) -> f64 {
    ks_distance(a, b).unwrap_or(f64::NAN)
}

/// Column j of a row-major sample.
pub fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}
