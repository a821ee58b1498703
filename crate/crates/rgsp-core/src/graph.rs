//! Graph-shift operators: structural validation, cached spectra, and the
//! graph Fourier transform.

use crate::error::{Result, RgspError};
use crate::la;
use crate::lapack;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use std::sync::OnceLock;

/// Structural class of a shift operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GsoKind {
    /// Symmetric, nonnegative, hollow diagonal.
    Adjacency,
    /// Combinatorial Laplacian: symmetric, nonpositive off-diagonals, zero row sums.
    CombinatorialLaplacian,
    /// Any symmetric matrix with graph-consistent sparsity.
    GenericSymmetric,
    /// Possibly asymmetric; usable only while numerically diagonalizable.
    GenericDiagonalizable,
}

impl GsoKind {
    pub fn is_symmetric(self) -> bool {
        !matches!(self, GsoKind::GenericDiagonalizable)
    }
}

/// Real eigendecomposition (symmetric shift operators), eigenvalues descending.
#[derive(Debug, Clone)]
pub struct RealSpectrum {
    pub lam: DVector<f64>,
    pub v: DMatrix<f64>,
    /// V^{-1}; equals V^T for the orthonormal symmetric factorization.
    pub vinv: DMatrix<f64>,
}

/// Eigendecomposition of the shift operator.
///
/// The complex form is always populated; `real` is the fast path available for
/// symmetric operators. Eigenvalues are sorted descending (by real part, then
/// imaginary part, for complex spectra), so "the K leading eigenvectors" are
/// always the first K columns of V.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub lam_c: DVector<Complex64>,
    pub v_c: DMatrix<Complex64>,
    pub vinv_c: DMatrix<Complex64>,
    pub real: Option<RealSpectrum>,
    /// 2-norm condition number of the eigenvector matrix.
    pub cond_v: f64,
}

/// Dense N x N graph-shift operator with a lazily computed spectrum.
#[derive(Debug)]
pub struct Gso {
    mat: DMatrix<f64>,
    kind: GsoKind,
    spectrum: OnceLock<Result<Spectrum>>,
}

impl Clone for Gso {
    fn clone(&self) -> Self {
        Gso {
            mat: self.mat.clone(),
            kind: self.kind,
            spectrum: match self.spectrum.get() {
                Some(s) => OnceLock::from(s.clone()),
                None => OnceLock::new(),
            },
        }
    }
}

/// Condition number of V beyond which a directed operator is rejected.
pub const COND_V_LIMIT: f64 = 1e8;

impl Gso {
    /// Validate `mat` against the declared kind and wrap it.
    pub fn new(mat: DMatrix<f64>, kind: GsoKind) -> Result<Gso> {
        if mat.nrows() != mat.ncols() || mat.nrows() == 0 {
            return Err(RgspError::InvalidStructure("shift operator must be square and nonempty".into()));
        }
        let n = mat.nrows();
        let scale = mat.amax().max(1.0);
        let sym_ok = (0..n).all(|i| (i + 1..n).all(|j| (mat[(i, j)] - mat[(j, i)]).abs() <= 1e-12 * scale));
        match kind {
            GsoKind::Adjacency => {
                if !sym_ok {
                    return Err(RgspError::InvalidStructure("adjacency must be symmetric".into()));
                }
                for i in 0..n {
                    if mat[(i, i)] != 0.0 {
                        return Err(RgspError::InvalidStructure(format!("adjacency has self-loop at node {i}")));
                    }
                    for j in 0..n {
                        if mat[(i, j)] < 0.0 {
                            return Err(RgspError::InvalidStructure(format!("negative adjacency weight at ({i},{j})")));
                        }
                    }
                }
            }
            GsoKind::CombinatorialLaplacian => {
                if !sym_ok {
                    return Err(RgspError::InvalidStructure("Laplacian must be symmetric".into()));
                }
                for i in 0..n {
                    let mut row = 0.0;
                    for j in 0..n {
                        row += mat[(i, j)];
                        if i != j && mat[(i, j)] > 1e-12 * scale {
                            return Err(RgspError::InvalidStructure(format!("positive off-diagonal at ({i},{j})")));
                        }
                    }
                    if row.abs() > 1e-9 * scale {
                        return Err(RgspError::InvalidStructure(format!("row {i} sum {row} is nonzero")));
                    }
                }
            }
            GsoKind::GenericSymmetric => {
                if !sym_ok {
                    return Err(RgspError::InvalidStructure("declared symmetric but is not".into()));
                }
            }
            GsoKind::GenericDiagonalizable => {}
        }
        Ok(Gso { mat, kind, spectrum: OnceLock::new() })
    }

    /// Assemble a shift operator from an edge list (see also `random_graph`).
    ///
    /// Duplicate edges are rejected; for the Laplacian kind the edges describe
    /// the underlying adjacency and L = diag(A1) - A is produced.
    pub fn from_edges(n: usize, edges: &[(usize, usize)], weights: Option<&[f64]>, kind: GsoKind) -> Result<Gso> {
        if let Some(w) = weights {
            if w.len() != edges.len() {
                return Err(RgspError::DimensionMismatch(format!("{} edges but {} weights", edges.len(), w.len())));
            }
        }
        let mut a = DMatrix::<f64>::zeros(n, n);
        for (idx, &(i, j)) in edges.iter().enumerate() {
            if i >= n || j >= n {
                return Err(RgspError::InvalidStructure(format!("edge ({i},{j}) outside 0..{n}")));
            }
            let w = weights.map_or(1.0, |w| w[idx]);
            let directed = kind == GsoKind::GenericDiagonalizable;
            if a[(i, j)] != 0.0 {
                return Err(RgspError::InvalidStructure(format!("duplicate edge ({i},{j})")));
            }
            a[(i, j)] = w;
            if !directed {
                if i != j && a[(j, i)] != 0.0 && a[(j, i)] != w {
                    return Err(RgspError::InvalidStructure(format!("duplicate edge ({j},{i})")));
                }
                a[(j, i)] = w;
            }
        }
        let mat = match kind {
            GsoKind::CombinatorialLaplacian => {
                let deg = DVector::from_iterator(n, a.row_iter().map(|r| r.sum()));
                DMatrix::from_diagonal(&deg) - a
            }
            _ => a,
        };
        Gso::new(mat, kind)
    }

    pub fn n(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn kind(&self) -> GsoKind {
        self.kind
    }

    /// Off-diagonal nonzero columns of row i.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n()).filter(|&j| j != i && (self.mat[(i, j)] != 0.0 || self.mat[(j, i)] != 0.0)).collect()
    }

    /// Upper-triangular nonzero entries as (i, j, w), i < j. Symmetric kinds only.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if self.mat[(i, j)] != 0.0 {
                    out.push((i, j, self.mat[(i, j)]));
                }
            }
        }
        out
    }

    /// Weighted degree vector (row sums of |S| off-diagonal).
    pub fn degrees(&self) -> DVector<f64> {
        let n = self.n();
        DVector::from_fn(n, |i, _| (0..n).filter(|&j| j != i).map(|j| self.mat[(i, j)].abs()).sum())
    }

    /// Combinatorial Laplacian of the graph underlying this operator.
    pub fn laplacian(&self) -> Result<DMatrix<f64>> {
        match self.kind {
            GsoKind::CombinatorialLaplacian => Ok(self.mat.clone()),
            GsoKind::Adjacency => {
                let deg = DVector::from_iterator(self.n(), self.mat.row_iter().map(|r| r.sum()));
                Ok(DMatrix::from_diagonal(&deg) - &self.mat)
            }
            _ => Err(RgspError::InvalidParams("Laplacian only derivable from adjacency or Laplacian kinds".into())),
        }
    }

    /// Eigendecomposition, computed once and cached.
    pub fn spectrum(&self) -> Result<&Spectrum> {
        self.spectrum
            .get_or_init(|| if self.kind.is_symmetric() { self.spectrum_symmetric() } else { self.spectrum_general() })
            .as_ref()
            .map_err(|e| e.clone())
    }

    fn spectrum_symmetric(&self) -> Result<Spectrum> {
        let (lam, v) = la::sym_eigen_desc(&self.mat);
        let rec = &v * DMatrix::from_diagonal(&lam) * v.transpose();
        let denom = self.mat.norm().max(f64::MIN_POSITIVE);
        if (rec - &self.mat).norm() > 1e-10 * denom.max(1.0) {
            return Err(RgspError::NonDiagonalizable("symmetric eigendecomposition failed to reconstruct".into()));
        }
        let vinv = v.transpose();
        Ok(Spectrum {
            lam_c: lam.map(|x| Complex64::new(x, 0.0)),
            v_c: v.map(|x| Complex64::new(x, 0.0)),
            vinv_c: vinv.map(|x| Complex64::new(x, 0.0)),
            real: Some(RealSpectrum { lam, v, vinv }),
            cond_v: 1.0,
        })
    }

    fn spectrum_general(&self) -> Result<Spectrum> {
        let n = self.n();
        let (lam_raw, v_raw) = lapack::eig_general(&self.mat)?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| {
            lam_raw[b].re.total_cmp(&lam_raw[a].re).then(lam_raw[b].im.total_cmp(&lam_raw[a].im))
        });
        let lam_c = DVector::from_iterator(n, idx.iter().map(|&i| lam_raw[i]));
        let mut v_c = DMatrix::<Complex64>::zeros(n, n);
        for (col, &i) in idx.iter().enumerate() {
            v_c.set_column(col, &v_raw.column(i));
        }
        let cond_v = la::cond_c(&v_c);
        if !cond_v.is_finite() || cond_v > COND_V_LIMIT {
            return Err(RgspError::NonDiagonalizable(format!("cond(V) = {cond_v:.3e} exceeds {COND_V_LIMIT:.0e}")));
        }
        let vinv_c = v_c
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| RgspError::NonDiagonalizable("eigenvector matrix not invertible".into()))?;
        // accept only if the factorization actually reproduces S
        let sc = self.mat.map(|x| Complex64::new(x, 0.0));
        let rec = &v_c * DMatrix::from_diagonal(&lam_c) * &vinv_c;
        if (rec - &sc).norm() > 1e-8 * self.mat.norm().max(1.0) {
            return Err(RgspError::NonDiagonalizable("eigenbasis fails to reconstruct the operator".into()));
        }
        let real = if lam_c.iter().all(|z| z.im == 0.0) && v_c.iter().all(|z| z.im == 0.0) {
            let lam = lam_c.map(|z| z.re);
            let v = v_c.map(|z| z.re);
            let vinv = vinv_c.map(|z| z.re);
            Some(RealSpectrum { lam, v, vinv })
        } else {
            None
        };
        Ok(Spectrum { lam_c, v_c, vinv_c, real, cond_v })
    }

    /// Real spectrum or an error explaining why it is unavailable.
    pub fn real_spectrum(&self) -> Result<&RealSpectrum> {
        self.spectrum()?.real.as_ref().ok_or_else(|| {
            RgspError::NonDiagonalizable("operator has a complex spectrum; use the complex-path APIs".into())
        })
    }

    /// First k eigenvector columns (descending eigenvalue order).
    pub fn v_k(&self, k: usize) -> Result<DMatrix<f64>> {
        let sp = self.real_spectrum()?;
        if k > self.n() {
            return Err(RgspError::InvalidParams(format!("bandwidth {k} exceeds n={}", self.n())));
        }
        Ok(sp.v.columns(0, k).into_owned())
    }

    /// Frequency representation V^{-1} x.
    pub fn gft(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(x)?;
        Ok(&self.real_spectrum()?.vinv * x)
    }

    /// Inverse transform V x_tilde.
    pub fn igft(&self, xt: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(xt)?;
        Ok(&self.real_spectrum()?.v * xt)
    }

    /// Frequency representation for complex spectra.
    pub fn gft_complex(&self, x: &DVector<f64>) -> Result<DVector<Complex64>> {
        self.check_len(x)?;
        Ok(&self.spectrum()?.vinv_c * x.map(|v| Complex64::new(v, 0.0)))
    }

    pub fn igft_complex(&self, xt: &DVector<Complex64>) -> Result<DVector<Complex64>> {
        if xt.len() != self.n() {
            return Err(RgspError::DimensionMismatch(format!("signal length {} vs n={}", xt.len(), self.n())));
        }
        Ok(&self.spectrum()?.v_c * xt)
    }

    /// Vandermonde matrix of the (real) spectrum with r columns.
    pub fn vandermonde(&self, r: usize) -> Result<DMatrix<f64>> {
        Ok(la::vandermonde(&self.real_spectrum()?.lam, r))
    }

    pub fn vandermonde_complex(&self, r: usize) -> Result<DMatrix<Complex64>> {
        Ok(la::vandermonde_c(&self.spectrum()?.lam_c, r))
    }

    /// Columns [x, Sx, S^2 x, ..., S^{len-1} x] built by repeated application.
    pub fn diffuse(&self, x: &DVector<f64>, len: usize) -> Result<DMatrix<f64>> {
        self.check_len(x)?;
        let n = self.n();
        let mut z = DMatrix::zeros(n, len);
        let mut cur = x.clone();
        for r in 0..len {
            z.set_column(r, &cur);
            if r + 1 < len {
                cur = &self.mat * cur;
            }
        }
        Ok(z)
    }

    /// Check that an optional edge list covers the sparsity of this operator.
    pub fn check_sparsity(&self, edges: &[(usize, usize)]) -> Result<()> {
        let n = self.n();
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            allowed[i * n + i] = true;
        }
        for &(i, j) in edges {
            allowed[i * n + j] = true;
            allowed[j * n + i] = true;
        }
        for i in 0..n {
            for j in 0..n {
                if self.mat[(i, j)] != 0.0 && !allowed[i * n + j] {
                    return Err(RgspError::InvalidStructure(format!("nonzero at ({i},{j}) without an edge")));
                }
            }
        }
        Ok(())
    }

    fn check_len(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.n() {
            return Err(RgspError::DimensionMismatch(format!("signal length {} vs n={}", x.len(), self.n())));
        }
        Ok(())
    }
}
