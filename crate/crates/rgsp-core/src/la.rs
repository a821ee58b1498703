//! Small dense linear-algebra helpers shared across the crate.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Singular values below max(n, m) * eps * sigma_max count as zero.
pub fn pinv_tol(nrows: usize, ncols: usize, sigma_max: f64) -> f64 {
    nrows.max(ncols) as f64 * f64::EPSILON * sigma_max
}

/// Moore-Penrose pseudoinverse with the crate-wide singular value cutoff.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    pinv_with_rank(a).0
}

/// Pseudoinverse plus the numerical rank it used.
pub fn pinv_with_rank(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    if a.is_empty() {
        return (DMatrix::zeros(a.ncols(), a.nrows()), 0);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = pinv_tol(a.nrows(), a.ncols(), smax);
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut si = DMatrix::zeros(vt.nrows(), u.ncols());
    for i in 0..rank {
        si[(i, i)] = 1.0 / svd.singular_values[i];
    }
    (vt.transpose() * si * u.transpose(), rank)
}

/// Minimum-norm least-squares solution of A X = B.
pub fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    pinv(a) * b
}

/// Numerical rank with the pinv cutoff.
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let tol = pinv_tol(a.nrows(), a.ncols(), sv.max());
    sv.iter().filter(|&&s| s > tol).count()
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().singular_values().max()
}

/// 2-norm condition number; infinite when rank deficient.
pub fn cond(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let tol = pinv_tol(a.nrows(), a.ncols(), smax);
    if smin <= tol { f64::INFINITY } else { smax / smin }
}

/// 2-norm condition number of a complex matrix.
pub fn cond_c(a: &DMatrix<Complex64>) -> f64 {
    let sv = a.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let smin = sv.min();
    if smin <= smax * f64::EPSILON * a.nrows().max(a.ncols()) as f64 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Symmetric eigendecomposition sorted by descending eigenvalue.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let se = a.clone().symmetric_eigen();
    let n = a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| se.eigenvalues[j].total_cmp(&se.eigenvalues[i]));
    let lam = DVector::from_iterator(n, idx.iter().map(|&i| se.eigenvalues[i]));
    let mut v = DMatrix::zeros(n, n);
    for (col, &i) in idx.iter().enumerate() {
        v.set_column(col, &se.eigenvectors.column(i));
    }
    (lam, v)
}

/// Vandermonde matrix: row i is the geometric progression of lam[i], r columns.
pub fn vandermonde(lam: &DVector<f64>, r: usize) -> DMatrix<f64> {
    let n = lam.len();
    let mut psi = DMatrix::zeros(n, r);
    for i in 0..n {
        let mut p = 1.0;
        for j in 0..r {
            psi[(i, j)] = p;
            p *= lam[i];
        }
    }
    psi
}

/// Complex Vandermonde for directed spectra.
pub fn vandermonde_c(lam: &DVector<Complex64>, r: usize) -> DMatrix<Complex64> {
    let n = lam.len();
    let mut psi = DMatrix::zeros(n, r);
    for i in 0..n {
        let mut p = Complex64::new(1.0, 0.0);
        for j in 0..r {
            psi[(i, j)] = p;
            p *= lam[i];
        }
    }
    psi
}

/// Soft-thresholding (proximal map of t * |.|).
pub fn soft(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Column-major vectorization.
pub fn vec_of(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of `vec_of`.
pub fn unvec(v: &DVector<f64>, nrows: usize, ncols: usize) -> DMatrix<f64> {
    assert_eq!(v.len(), nrows * ncols);
    DMatrix::from_column_slice(nrows, ncols, v.as_slice())
}

/// Frobenius norm of the commutator AB - BA.
pub fn commutator_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a * b - b * a).norm()
}

/// Orthogonal Procrustes: the orthogonal Q minimizing ||A - B Q||_F.
pub fn procrustes(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let m = b.transpose() * a;
    let svd = m.svd(true, true);
    svd.u.unwrap() * svd.v_t.unwrap()
}

/// Golden-section minimization of a unimodal scalar function on [a, b].
pub fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    const INVPHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INVPHI * (b - a);
    let mut d = a + INVPHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INVPHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INVPHI * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Median of a slice (averaging the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

/// Mean of a slice.
pub fn mean(xs: &[f64]) -> f64 {
    assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}
