//! Dense complex linear-algebra helpers shared by the estimators.
//!
//! Everything here is a thin layer over `nalgebra`; the routines exist to pin
//! down conventions (ordering of eigenpairs, rank thresholds, angle wrapping)
//! that the estimators rely on.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use std::f64::consts::PI;

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

/// Relative singular-value floor below which a least-squares system is
/// treated as rank deficient.
pub const RANK_RCOND: f64 = 1e-10;

/// ULA response `exp(j*pi*sin*m) / sqrt(n)` for `m = 0..n`.
pub fn steering_vector(n_antennas: usize, angle_sin: f64) -> CVec {
    let scale = 1.0 / (n_antennas as f64).sqrt();
    CVec::from_fn(n_antennas, |m, _| {
        Complex64::from_polar(scale, PI * angle_sin * m as f64)
    })
}

/// Columns are steering vectors for each entry of `sins`.
pub fn steering_matrix(n_antennas: usize, sins: &[f64]) -> CMat {
    let mut out = CMat::zeros(n_antennas, sins.len());
    for (i, &s) in sins.iter().enumerate() {
        out.set_column(i, &steering_vector(n_antennas, s));
    }
    out
}

/// Circularly-symmetric complex Gaussian sample with the given variance.
pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, variance: f64) -> Complex64 {
    let s = (variance / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Fills a matrix with i.i.d. `CN(0, variance)` entries, column-major order.
pub fn complex_gaussian_matrix<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    variance: f64,
) -> CMat {
    let mut m = CMat::zeros(rows, cols);
    for c in 0..cols {
        for r in 0..rows {
            m[(r, c)] = complex_gaussian(rng, variance);
        }
    }
    m
}

/// Least-squares solution of `a * x = b` through the SVD of `a`.
///
/// Returns `None` when `a` does not have full column rank at relative
/// tolerance [`RANK_RCOND`].
pub fn lstsq(a: &CMat, b: &CMat) -> Option<CMat> {
    if a.ncols() == 0 || a.nrows() < a.ncols() {
        return None;
    }
    let svd = a.clone().svd(true, true);
    let sv = &svd.singular_values;
    let max = sv.max();
    let min = sv.min();
    if !(max > 0.0) || min <= RANK_RCOND * max {
        return None;
    }
    svd.solve(b, 0.0).ok()
}

/// Moore-Penrose pseudo-inverse of a full-column-rank matrix.
pub fn pinv(a: &CMat) -> Option<CMat> {
    lstsq(a, &CMat::identity(a.nrows(), a.nrows()))
}

/// Number of singular values above `rtol * sigma_max`.
pub fn numerical_rank(a: &CMat, rtol: f64) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    sv.iter().filter(|&&s| s > rtol * max).count()
}

/// Eigen-decomposition of a Hermitian matrix with eigenpairs sorted by
/// descending eigenvalue.
pub fn hermitian_eigen_desc(h: &CMat) -> (Vec<f64>, CMat) {
    let eig = SymmetricEigen::new(h.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = CMat::zeros(h.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Eigenvalues of a general complex square matrix (diagonal of its Schur form).
pub fn eigenvalues(m: &CMat) -> Vec<Complex64> {
    let (_, t) = Schur::new(m.clone()).unpack();
    (0..t.nrows()).map(|i| t[(i, i)]).collect()
}

/// Orthonormal basis of the orthogonal complement of `v` (n x (n-1)),
/// taken from the Householder reflector that maps `v` onto `e_1`.
pub fn orthogonal_complement(v: &CVec) -> CMat {
    let n = v.len();
    let norm = v.norm();
    if n <= 1 {
        return CMat::zeros(n, 0);
    }
    if norm == 0.0 {
        return CMat::identity(n, n).columns(1, n - 1).into_owned();
    }
    // Reflector H = I - 2 u u^H / (u^H u) with u = v + e^{j arg v0} |v| e_1.
    let phase = if v[0].norm() > 0.0 {
        v[0] / v[0].norm()
    } else {
        Complex64::new(1.0, 0.0)
    };
    let mut u = v.clone();
    u[0] += phase * norm;
    let uu = u.norm_squared();
    let mut basis = CMat::zeros(n, n - 1);
    for col in 1..n {
        // H e_col = e_col - 2 u conj(u_col) / uu
        let coeff = u[col].conj() * (2.0 / uu);
        for row in 0..n {
            let e = if row == col { 1.0 } else { 0.0 };
            basis[(row, col - 1)] = Complex64::new(e, 0.0) - u[row] * coeff;
        }
    }
    basis
}

/// Maps a sine-domain value onto `[-1, 1)` modulo 2.
pub fn wrap_sin(x: f64) -> f64 {
    let w = (x + 1.0).rem_euclid(2.0) - 1.0;
    if w >= 1.0 {
        -1.0
    } else {
        w
    }
}

/// Distance between two sine-domain values on the circle of circumference 2.
pub fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0);
    d.min(2.0 - d)
}

/// Smallest pairwise circular distance, `f64::INFINITY` for fewer than two values.
pub fn min_separation(values: &[f64]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            best = best.min(circular_distance(values[i], values[j]));
        }
    }
    best
}

/// Column-major `vec(.)` of a matrix.
pub fn vectorize(m: &CMat) -> CVec {
    CVec::from_column_slice(m.as_slice())
}

pub fn frobenius_sq(m: &CMat) -> f64 {
    m.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn steering_examples() {
        let v = steering_vector(4, 0.0);
        for z in v.iter() {
            assert!((z - c(0.5, 0.0)).norm() < 1e-15);
        }
        let v = steering_vector(2, 1.0);
        let s = 1.0 / 2f64.sqrt();
        assert!((v[0] - c(s, 0.0)).norm() < 1e-15);
        assert!((v[1] - c(-s, 0.0)).norm() < 1e-15);
        let v = steering_vector(3, 0.5);
        let s = 1.0 / 3f64.sqrt();
        assert!((v[0] - c(s, 0.0)).norm() < 1e-15);
        assert!((v[1] - c(0.0, s)).norm() < 1e-15);
        assert!((v[2] - c(-s, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn complement_is_orthonormal_and_orthogonal() {
        let v = CVec::from_vec(vec![c(0.3, -1.0), c(2.0, 0.5), c(0.0, 0.0), c(-0.7, 0.1)]);
        let u = orthogonal_complement(&v);
        assert_eq!(u.shape(), (4, 3));
        assert!((u.adjoint() * &v).norm() < 1e-12);
        assert!((u.adjoint() * &u - CMat::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn complement_handles_zero_leading_entry() {
        let v = CVec::from_vec(vec![c(0.0, 0.0), c(0.0, 2.0), c(1.0, 0.0)]);
        let u = orthogonal_complement(&v);
        assert!((u.adjoint() * &v).norm() < 1e-12);
        assert!((u.adjoint() * &u - CMat::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn lstsq_rejects_rank_deficient() {
        let a = CMat::from_fn(4, 2, |r, _| c(r as f64, 0.0));
        assert!(lstsq(&a, &CMat::zeros(4, 1)).is_none());
        let a = CMat::from_fn(4, 2, |r, k| c((r * (k + 1)) as f64, k as f64));
        let x = CMat::from_vec(2, 1, vec![c(1.0, 2.0), c(-0.5, 0.0)]);
        let b = &a * &x;
        let sol = lstsq(&a, &b).unwrap();
        assert!((sol - x).norm() < 1e-12);
    }

    #[test]
    fn wrap_and_distance() {
        assert_eq!(wrap_sin(1.0), -1.0);
        assert!((wrap_sin(1.25) + 0.75).abs() < 1e-15);
        assert!((wrap_sin(-1.25) - 0.75).abs() < 1e-15);
        assert!((circular_distance(0.99, -0.99) - 0.02).abs() < 1e-12);
    }

    #[test]
    fn hermitian_eigen_sorted_descending() {
        let a = CMat::from_fn(5, 3, |r, k| c((r + k) as f64 * 0.3, (r as f64) - (k as f64)));
        let h = &a * a.adjoint();
        let (vals, vecs) = hermitian_eigen_desc(&h);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..5 {
            let v = vecs.column(i);
            assert!((&h * v - v * c(vals[i], 0.0)).norm() < 1e-9);
        }
    }
}
