//! Polynomial graph filters H = sum_r h_r S^r and their identification from
//! observed input/output signal pairs.

use crate::error::{Result, RgspError};
use crate::graph::Gso;
use crate::la;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Polynomial filter with materialized operator, tied to the shift operator
/// used at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFilter {
    h: DVector<f64>,
    mat: DMatrix<f64>,
}

impl GraphFilter {
    /// Build H = sum_{r=0}^{R-1} h_r S^r by repeated multiplication with S.
    pub fn new(gso: &Gso, coeffs: &[f64]) -> Result<GraphFilter> {
        if coeffs.is_empty() {
            return Err(RgspError::InvalidParams("filter needs at least one coefficient".into()));
        }
        let n = gso.n();
        let mut power = DMatrix::<f64>::identity(n, n);
        let mut mat = DMatrix::<f64>::zeros(n, n);
        for (r, &c) in coeffs.iter().enumerate() {
            if r > 0 {
                power = gso.matrix() * power;
            }
            mat += c * &power;
        }
        Ok(GraphFilter { h: DVector::from_row_slice(coeffs), mat })
    }

    /// Filter with i.i.d. standard normal coefficients of the given order.
    pub fn random(gso: &Gso, order: usize, rng: &mut impl Rng) -> Result<GraphFilter> {
        let h: Vec<f64> = (0..order).map(|_| StandardNormal.sample(rng)).collect();
        GraphFilter::new(gso, &h)
    }

    pub fn identity(gso: &Gso) -> GraphFilter {
        GraphFilter::new(gso, &[1.0]).unwrap()
    }

    pub fn coeffs(&self) -> &DVector<f64> {
        &self.h
    }

    pub fn order(&self) -> usize {
        self.h.len()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn n(&self) -> usize {
        self.mat.nrows()
    }

    /// Y = HX.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.n() {
            return Err(RgspError::DimensionMismatch(format!("{} signal rows vs n={}", x.nrows(), self.n())));
        }
        Ok(&self.mat * x)
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n() {
            return Err(RgspError::DimensionMismatch(format!("signal length {} vs n={}", x.len(), self.n())));
        }
        Ok(&self.mat * x)
    }

    /// Frequency response Psi h over the (real) spectrum of `gso`.
    pub fn freq_response(&self, gso: &Gso) -> Result<DVector<f64>> {
        let psi = gso.vandermonde(self.order())?;
        Ok(psi * &self.h)
    }
}

/// Evaluate sum_r h_r S^r X by iterated shifts, never forming powers of S.
pub fn horner_apply(gso: &Gso, coeffs: &[f64], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != gso.n() {
        return Err(RgspError::DimensionMismatch(format!("{} signal rows vs n={}", x.nrows(), gso.n())));
    }
    if coeffs.is_empty() {
        return Err(RgspError::InvalidParams("filter needs at least one coefficient".into()));
    }
    let mut shifted = x.clone();
    let mut y = coeffs[0] * &shifted;
    for &c in &coeffs[1..] {
        shifted = gso.matrix() * shifted;
        y += c * &shifted;
    }
    Ok(y)
}

/// Least-squares filter identification result.
#[derive(Debug, Clone)]
pub struct FilterIdResult {
    pub h: DVector<f64>,
    /// Numerical rank of the design matrix.
    pub rank: usize,
    /// True when rank < R; `h` is then the minimum-norm solution.
    pub rank_deficient: bool,
}

/// Identify filter coefficients from (X, Y = HX + noise) in the frequency
/// domain: h = pinv(Xi) vec(Y) with Xi = khatri_rao((V^{-1}X)^T, V) Psi.
///
/// Falls back to the vertex-domain solve when the spectrum is complex.
pub fn identify_filter_ls(gso: &Gso, x: &DMatrix<f64>, y: &DMatrix<f64>, r: usize) -> Result<FilterIdResult> {
    check_id_dims(gso, x, y, r)?;
    let sp = match gso.real_spectrum() {
        Ok(sp) => sp,
        Err(_) => return identify_filter_vertex(gso, x, y, r),
    };
    let n = gso.n();
    let m = x.ncols();
    let xt = &sp.vinv * x;
    // column j of the Khatri-Rao factor: (row j of V^{-1}X) kron v_j
    let mut kr = DMatrix::<f64>::zeros(n * m, n);
    for j in 0..n {
        for mm in 0..m {
            let w = xt[(j, mm)];
            for i in 0..n {
                kr[(mm * n + i, j)] = w * sp.v[(i, j)];
            }
        }
    }
    let xi = kr * la::vandermonde(&sp.lam, r);
    solve_id(&xi, &la::vec_of(y), r)
}

/// Vertex-domain identification: regress vec(Y) on columns vec(S^r X).
pub fn identify_filter_vertex(gso: &Gso, x: &DMatrix<f64>, y: &DMatrix<f64>, r: usize) -> Result<FilterIdResult> {
    check_id_dims(gso, x, y, r)?;
    let (n, m) = (x.nrows(), x.ncols());
    let mut design = DMatrix::<f64>::zeros(n * m, r);
    let mut shifted = x.clone();
    for c in 0..r {
        if c > 0 {
            shifted = gso.matrix() * shifted;
        }
        design.set_column(c, &la::vec_of(&shifted));
    }
    solve_id(&design, &la::vec_of(y), r)
}

fn solve_id(design: &DMatrix<f64>, rhs: &DVector<f64>, r: usize) -> Result<FilterIdResult> {
    let (pinv, rank) = la::pinv_with_rank(design);
    Ok(FilterIdResult { h: pinv * rhs, rank, rank_deficient: rank < r })
}

fn check_id_dims(gso: &Gso, x: &DMatrix<f64>, y: &DMatrix<f64>, r: usize) -> Result<()> {
    if x.nrows() != gso.n() || y.nrows() != gso.n() || x.ncols() != y.ncols() {
        return Err(RgspError::DimensionMismatch(format!(
            "X is {}x{}, Y is {}x{}, n={}",
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols(),
            gso.n()
        )));
    }
    if r == 0 {
        return Err(RgspError::InvalidParams("filter order must be at least 1".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GsoKind;
    use crate::graphgen::{random_graph, GraphModel};
    use crate::rng::seeded_rng;
    use crate::signals::nerr;
    use rand::Rng;

    fn path3() -> Gso {
        Gso::from_edges(3, &[(0, 1), (1, 2)], None, GsoKind::Adjacency).unwrap()
    }

    #[test]
    fn identity_filter_is_identity() {
        let g = path3();
        let f = GraphFilter::identity(&g);
        let x = DVector::from_row_slice(&[1.0, -2.0, 0.5]);
        assert_eq!(f.apply_vec(&x).unwrap(), x);
    }

    #[test]
    fn pure_shift_on_path() {
        let g = path3();
        let f = GraphFilter::new(&g, &[0.0, 1.0]).unwrap();
        let x = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
        assert_eq!(f.apply_vec(&x).unwrap(), DVector::from_row_slice(&[0.0, 1.0, 0.0]));
    }

    #[test]
    fn matrix_commutes_and_matches_horner() {
        let g = random_graph(GraphModel::Er { n: 12, p: 0.3 }, 4).unwrap();
        let mut rng = seeded_rng(9, &[1]);
        let f = GraphFilter::random(&g, 5, &mut rng).unwrap();
        let s = g.matrix();
        let comm = (f.matrix() * s - s * f.matrix()).norm();
        assert!(comm <= 1e-10 * f.matrix().norm() * s.norm());
        let x = DMatrix::from_fn(12, 3, |_, _| rng.random::<f64>() - 0.5);
        let horner = horner_apply(&g, f.coeffs().as_slice(), &x).unwrap();
        assert!((f.apply(&x).unwrap() - horner).norm() < 1e-10 * x.norm().max(1.0));
    }

    #[test]
    fn frequency_domain_oracle() {
        // H x equals V diag(Psi h) V^{-1} x
        let g = random_graph(GraphModel::Er { n: 8, p: 0.4 }, 11).unwrap();
        let mut rng = seeded_rng(11, &[2]);
        let f = GraphFilter::random(&g, 4, &mut rng).unwrap();
        let sp = g.real_spectrum().unwrap();
        let x = DVector::from_fn(8, |_, _| rng.random::<f64>() - 0.5);
        let ht = f.freq_response(&g).unwrap();
        let oracle = &sp.v * DMatrix::from_diagonal(&ht) * &sp.vinv * &x;
        assert!((f.apply_vec(&x).unwrap() - oracle).norm() < 1e-8);
    }

    #[test]
    fn identify_recovers_planted_coefficients() {
        let g = random_graph(GraphModel::Er { n: 10, p: 0.35 }, 21).unwrap();
        let mut rng = seeded_rng(21, &[3]);
        let f = GraphFilter::random(&g, 4, &mut rng).unwrap();
        let x = DMatrix::from_fn(10, 20, |_, _| rng.random::<f64>() - 0.5);
        let y = f.apply(&x).unwrap();
        let freq = identify_filter_ls(&g, &x, &y, 4).unwrap();
        assert!(!freq.rank_deficient);
        assert!(nerr(&DMatrix::from_column_slice(4, 1, freq.h.as_slice()), &DMatrix::from_column_slice(4, 1, f.coeffs().as_slice())).unwrap() < 1e-8);
        let vertex = identify_filter_vertex(&g, &x, &y, 4).unwrap();
        assert!((&freq.h - &vertex.h).norm() < 1e-7);
    }

    #[test]
    fn identify_zero_output_gives_zero_filter() {
        let g = path3();
        let x = DMatrix::from_fn(3, 5, |i, j| ((i + 2 * j) as f64).sin());
        let y = DMatrix::zeros(3, 5);
        let res = identify_filter_ls(&g, &x, &y, 2).unwrap();
        assert!(res.h.norm() < 1e-12);
    }

    #[test]
    fn rank_deficiency_flagged() {
        // constant signal on a regular graph makes S x proportional to x
        let g = random_graph(GraphModel::Regular { n: 8, d: 3 }, 5).unwrap();
        let x = DMatrix::from_element(8, 2, 1.0);
        let y = x.clone();
        let res = identify_filter_ls(&g, &x, &y, 3).unwrap();
        assert!(res.rank_deficient);
        assert!(res.rank < 3);
    }
}
