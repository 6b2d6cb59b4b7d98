//! Small dense helpers on top of nalgebra: the half-vectorisation of
//! symmetric matrices, eigen-based PSD tests and projections.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper triangle of a symmetric matrix read row by row:
/// (A11, ..., A1m, A22, ..., A2m, ..., Amm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymHalfVec {
    order: usize,
    entries: Vec<f64>,
}

impl SymHalfVec {
    pub fn len_for(order: usize) -> usize {
        order * (order + 1) / 2
    }

    /// Recover m from m(m+1)/2, if `len` is a triangular number.
    pub fn order_for(len: usize) -> Option<usize> {
        let mut m = 0;
        while Self::len_for(m) < len {
            m += 1;
        }
        (Self::len_for(m) == len).then_some(m)
    }

    pub fn new(order: usize, entries: Vec<f64>) -> Result<Self> {
        crate::error::check_dim(Self::len_for(order), entries.len())?;
        Ok(Self { order, entries })
    }

    pub fn from_matrix(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::domain("half-vectorisation needs a square matrix"));
        }
        let m = a.nrows();
        let mut entries = Vec::with_capacity(Self::len_for(m));
        for i in 0..m {
            for j in i..m {
                entries.push(a[(i, j)]);
            }
        }
        Ok(Self { order: m, entries })
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let m = self.order;
        let mut a = DMatrix::zeros(m, m);
        let mut k = 0;
        for i in 0..m {
            for j in i..m {
                a[(i, j)] = self.entries[k];
                a[(j, i)] = self.entries[k];
                k += 1;
            }
        }
        a
    }

    pub fn index_of(order: usize, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        i * order - i * i.saturating_sub(1) / 2 + (j - i)
    }

    /// (row, col) of every stored entry, in storage order.
    pub fn pairs(order: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(Self::len_for(order));
        for i in 0..order {
            for j in i..order {
                out.push((i, j));
            }
        }
        out
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.entries
    }
}

pub fn sym_matrix_from_half(order: usize, entries: &[f64]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(order, order);
    let mut k = 0;
    for i in 0..order {
        for j in i..order {
            a[(i, j)] = entries[k];
            a[(j, i)] = entries[k];
            k += 1;
        }
    }
    a
}

pub fn half_from_sym_matrix(a: &DMatrix<f64>) -> Vec<f64> {
    let m = a.nrows();
    let mut out = Vec::with_capacity(SymHalfVec::len_for(m));
    for i in 0..m {
        for j in i..m {
            out.push(0.5 * (a[(i, j)] + a[(j, i)]));
        }
    }
    out
}

/// Eigen-decomposition with eigenvalues sorted ascending.
pub fn sym_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = 0.5 * (a + a.transpose());
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return f64::INFINITY;
    }
    if a.nrows() == 1 {
        return a[(0, 0)];
    }
    if a.nrows() == 2 {
        let (p, q, r) = (a[(0, 0)], 0.5 * (a[(0, 1)] + a[(1, 0)]), a[(1, 1)]);
        let mean = 0.5 * (p + r);
        let rad = (0.25 * (p - r) * (p - r) + q * q).sqrt();
        return mean - rad;
    }
    sym_eigen(a).0[0]
}

pub fn max_eigenvalue(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return f64::NEG_INFINITY;
    }
    sym_eigen(a).0[n - 1]
}

pub fn is_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    min_eigenvalue(a) >= -tol
}

/// Frobenius-nearest PSD matrix.
pub fn clip_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    let clipped = DMatrix::from_diagonal(&vals.map(|v| v.max(0.0)));
    let out = &vecs * clipped * vecs.transpose();
    0.5 * (&out + out.transpose())
}

/// Frobenius-nearest point of {A PSD, ||A||_F <= radius}. Projecting onto
/// the cone first and then radially onto the ball is exact because the
/// ball is centred at the cone's apex.
pub fn clip_psd_ball(a: &DMatrix<f64>, radius: f64) -> DMatrix<f64> {
    let p = clip_psd(a);
    let nrm = p.norm();
    if nrm > radius {
        p * (radius / nrm)
    } else {
        p
    }
}

/// Euclidean projection in half-vector coordinates onto a set of symmetric
/// matrices whose Frobenius projection is `frob_proj`.
///
/// The two metrics differ (off-diagonal entries count once in the
/// half-vector, twice in Frobenius), so the Frobenius projection is used
/// as the inner step of a projected-gradient loop on the half-vector
/// distance.
pub fn project_half_metric<F>(order: usize, u: &[f64], frob_proj: F) -> Vec<f64>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    let target = sym_matrix_from_half(order, u);
    let mut v = frob_proj(&target);
    if order == 1 {
        return vec![v[(0, 0)]];
    }
    let scale = 1.0 + target.norm();
    for _ in 0..400 {
        let mut step = v.clone();
        for i in 0..order {
            for j in 0..order {
                let g = v[(i, j)] - target[(i, j)];
                step[(i, j)] -= if i == j { g } else { 0.5 * g };
            }
        }
        let next = frob_proj(&step);
        let change = (&next - &v).norm();
        v = next;
        if change <= 1e-15 * scale {
            break;
        }
    }
    half_from_sym_matrix(&v)
}

/// Nearest point of the 2×2 PSD cone to (p, q, r) in half-vector coordinates.
pub fn project_psd2_half(u: [f64; 3]) -> [f64; 3] {
    let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    min_quadratic_psd2(&id, u)
}

/// argmin over the 2×2 PSD cone (half-vector coordinates) of ½(z − c)′Q(z − c),
/// Q symmetric positive definite.
///
/// Outside the cone the minimiser has rank at most one, z = t·u(φ) with
/// u(φ) = (cos²φ, cos φ sin φ, sin²φ). The optimal t ≥ 0 is u′Qc / u′Qu,
/// which leaves maximising N²/D over φ with N = u′Qc > 0 and D = u′Qu; it
/// is scanned on a grid and refined by safeguarded Newton on 2N′D − ND′.
pub fn min_quadratic_psd2(q: &[[f64; 3]; 3], c: [f64; 3]) -> [f64; 3] {
    let [p, b, r] = c;
    if p >= 0.0 && r >= 0.0 && p * r >= b * b {
        return c;
    }
    let mv = |v: [f64; 3]| -> [f64; 3] {
        [
            q[0][0] * v[0] + q[0][1] * v[1] + q[0][2] * v[2],
            q[1][0] * v[0] + q[1][1] * v[1] + q[1][2] * v[2],
            q[2][0] * v[0] + q[2][1] * v[1] + q[2][2] * v[2],
        ]
    };
    let dot3 = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let qc = mv(c);
    let u = |f: f64| {
        let (cs, sn) = (f.cos(), f.sin());
        [cs * cs, cs * sn, sn * sn]
    };
    let u1 = |f: f64| [-(2.0 * f).sin(), (2.0 * f).cos(), (2.0 * f).sin()];
    let u2 = |f: f64| [-2.0 * (2.0 * f).cos(), -2.0 * (2.0 * f).sin(), 2.0 * (2.0 * f).cos()];
    let ratio = |f: f64| {
        let uf = u(f);
        let n = dot3(uf, qc);
        if n > 0.0 {
            n * n / dot3(uf, mv(uf))
        } else {
            0.0
        }
    };
    let k = |f: f64| {
        let (uf, d1) = (u(f), u1(f));
        let qu = mv(uf);
        let (n, n1) = (dot3(uf, qc), dot3(d1, qc));
        let (d, dd1) = (dot3(uf, qu), 2.0 * dot3(d1, qu));
        2.0 * n1 * d - n * dd1
    };
    let kp = |f: f64| {
        let (uf, d1, d2) = (u(f), u1(f), u2(f));
        let qu = mv(uf);
        let (n, n1, n2) = (dot3(uf, qc), dot3(d1, qc), dot3(d2, qc));
        let d = dot3(uf, qu);
        let dd1 = 2.0 * dot3(d1, qu);
        let dd2 = 2.0 * dot3(d2, qu) + 2.0 * dot3(d1, mv(d1));
        2.0 * n2 * d + n1 * dd1 - n * dd2
    };
    const GRID: usize = 256;
    let step = std::f64::consts::PI / GRID as f64;
    let mut best = 0usize;
    let mut best_v = ratio(0.0);
    for i in 1..GRID {
        let v = ratio(i as f64 * step);
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    if best_v <= 0.0 {
        return [0.0, 0.0, 0.0];
    }
    let mut lo = (best as f64 - 1.0) * step;
    let mut hi = (best as f64 + 1.0) * step;
    let mut f = best as f64 * step;
    if k(lo) > 0.0 && k(hi) < 0.0 {
        for _ in 0..100 {
            let kv = k(f);
            if kv == 0.0 {
                break;
            }
            if kv > 0.0 {
                lo = f;
            } else {
                hi = f;
            }
            let dk = kp(f);
            let nf = if dk != 0.0 { f - kv / dk } else { f64::NAN };
            f = if nf > lo && nf < hi { nf } else { 0.5 * (lo + hi) };
            if hi - lo <= 1e-15 * (1.0 + f.abs()) {
                break;
            }
        }
    }
    let uf = u(f);
    let t = (dot3(uf, qc) / dot3(uf, mv(uf))).max(0.0);
    [t * uf[0], t * uf[1], t * uf[2]]
}

/// Orthonormal basis of the eigenspace with eigenvalues at most `tol`
/// times the spectral scale.
pub fn kernel_basis(a: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(a);
    let scale = vals.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let cols: Vec<usize> = (0..vals.len()).filter(|&i| vals[i].abs() <= tol * scale).collect();
    let mut k = DMatrix::zeros(a.nrows(), cols.len());
    for (c, &i) in cols.iter().enumerate() {
        k.set_column(c, &vecs.column(i));
    }
    k
}

pub fn cholesky_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    nalgebra::Cholesky::new(0.5 * (a + a.transpose())).map(|c| c.l())
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn half_vec_order_is_row_wise() {
        let a = DMatrix::from_row_slice(3, 3, &[1., 2., 3., 2., 4., 5., 3., 5., 6.]);
        let h = SymHalfVec::from_matrix(&a).unwrap();
        assert_eq!(h.entries(), &[1., 2., 3., 4., 5., 6.]);
        assert_eq!(SymHalfVec::pairs(3)[3], (1, 1));
        for (k, &(i, j)) in SymHalfVec::pairs(4).iter().enumerate() {
            assert_eq!(SymHalfVec::index_of(4, i, j), k);
            assert_eq!(SymHalfVec::index_of(4, j, i), k);
        }
    }

    #[test]
    fn clip_psd_zeroes_negative_part() {
        let a = DMatrix::from_row_slice(2, 2, &[2., 0., 0., -1.]);
        let p = clip_psd(&a);
        assert!((p[(0, 0)] - 2.0).abs() < 1e-14);
        assert!(p[(1, 1)].abs() < 1e-14);
    }

    #[test]
    fn half_metric_projection_beats_probes() {
        let u = [0.3, 1.7, -0.8];
        let p = project_half_metric(2, &u, clip_psd);
        let pm = sym_matrix_from_half(2, &p);
        assert!(min_eigenvalue(&pm) > -1e-12);
        let d0 = dist(&u, &p);
        let mut state = 1u64;
        for _ in 0..20000 {
            let mut w = [0.0; 3];
            for x in w.iter_mut() {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                *x = ((state >> 11) as f64 / (1u64 << 53) as f64) * 6.0 - 3.0;
            }
            if min_eigenvalue(&sym_matrix_from_half(2, &w)) >= 0.0 {
                assert!(d0 <= dist(&u, &w) + 1e-9);
            }
        }
    }

    proptest! {
        #[test]
        fn metric_psd2_minimiser_beats_probes(c0 in -3.0f64..3.0, c1 in -3.0f64..3.0, c2 in -3.0f64..3.0, l in prop::collection::vec(-1.0f64..1.0, 6)) {
            let lm = DMatrix::from_row_slice(3, 3, &[1.0 + l[0].abs(), 0.0, 0.0, l[1], 1.0 + l[2].abs(), 0.0, l[3], l[4], 1.0 + l[5].abs()]);
            let qm = &lm * lm.transpose();
            let q = [[qm[(0, 0)], qm[(0, 1)], qm[(0, 2)]], [qm[(1, 0)], qm[(1, 1)], qm[(1, 2)]], [qm[(2, 0)], qm[(2, 1)], qm[(2, 2)]]];
            let z = min_quadratic_psd2(&q, [c0, c1, c2]);
            prop_assert!(min_eigenvalue(&sym_matrix_from_half(2, &z)) >= -1e-12);
            let obj = |w: &[f64]| {
                let d = DVector::from_vec(vec![w[0] - c0, w[1] - c1, w[2] - c2]);
                0.5 * d.dot(&(&qm * &d))
            };
            let fz = obj(&z);
            let mut state = 7u64;
            for _ in 0..3000 {
                let mut w = [0.0; 3];
                for x in w.iter_mut() {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    *x = ((state >> 11) as f64 / (1u64 << 53) as f64) * 8.0 - 4.0;
                }
                if min_eigenvalue(&sym_matrix_from_half(2, &w)) >= 0.0 {
                    prop_assert!(fz <= obj(&w) + 1e-10);
                }
            }
        }

        #[test]
        fn closed_form_psd2_projection_matches_iterative(p in -3.0f64..3.0, q in -3.0f64..3.0, r in -3.0f64..3.0) {
            let fast = project_psd2_half([p, q, r]);
            let slow = project_half_metric(2, &[p, q, r], clip_psd);
            prop_assert!(dist(&fast, &slow) < 1e-6, "{:?} vs {:?}", fast, slow);
            prop_assert!(dist(&[p, q, r], &fast) <= dist(&[p, q, r], &slow) + 1e-12);
            prop_assert!(min_eigenvalue(&sym_matrix_from_half(2, &fast)) >= -1e-12);
        }

        #[test]
        fn half_vec_round_trip(vals in prop::collection::vec(-1e6f64..1e6, 10)) {
            let h = SymHalfVec::new(4, vals.clone()).unwrap();
            let back = SymHalfVec::from_matrix(&h.to_matrix()).unwrap();
            prop_assert_eq!(back.entries(), &vals[..]);
        }
    }
}
