//! Robust identification of graph filters when the available shift operator
//! is a perturbed copy of the truth: the data term is fit jointly with a
//! graph-denoising step that pulls the operator toward the observed copy
//! under reweighted l1 penalties and a commutativity coupling. Includes the
//! closed-form and gradient filter updates, a sparse tied-pair coordinate
//! descent for the graph update, stationarity-penalized and joint multi-graph
//! variants, an AR extension for time series, identifiability diagnostics,
//! and coefficient extraction from a recovered (filter, operator) pair.

use crate::error::{Result, RgspError};
use crate::graph::{Gso, GsoKind};
use crate::la;
use crate::lapack;
use crate::signals::nerr;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use std::path::Path;
use std::time::Instant;

/// Regularization weights for the robust identification objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfiWeights {
    /// Weight of the reweighted l1 pull toward the observed operator.
    pub lambda: f64,
    /// Weight of the reweighted l1 sparsity penalty.
    pub beta: f64,
    /// Weight of the filter/operator commutativity coupling.
    pub gamma: f64,
    /// Smoothing offset of the log penalty on S - S_bar.
    pub delta1: f64,
    /// Smoothing offset of the log penalty on S.
    pub delta2: f64,
}

impl Default for RfiWeights {
    fn default() -> Self {
        RfiWeights { lambda: 1.0, beta: 0.1, gamma: 10.0, delta1: 1e-3, delta2: 1e-3 }
    }
}

impl RfiWeights {
    fn validate(&self) -> Result<()> {
        for (v, name) in [(self.lambda, "lambda"), (self.beta, "beta"), (self.gamma, "gamma")] {
            if !v.is_finite() || v < 0.0 {
                return Err(RgspError::InvalidParams(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        for (v, name) in [(self.delta1, "delta1"), (self.delta2, "delta2")] {
            if !v.is_finite() || v <= 0.0 {
                return Err(RgspError::InvalidParams(format!("{name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Feasible operator families for the graph-denoising step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GsoConstraint {
    /// Symmetric, nonnegative, hollow-diagonal adjacency matrices.
    #[default]
    Adjacency,
}

/// Covariance side information for stationarity-regularized identification.
///
/// The feasibility radii `eps_x`/`eps_y` are kept for reporting; the solver
/// enforces the commutativity constraints as quadratic penalties `mu_x`/`mu_y`.
#[derive(Debug, Clone, PartialEq)]
pub struct StationarityData {
    pub c_x: DMatrix<f64>,
    pub c_y: DMatrix<f64>,
    pub eps_x: f64,
    pub eps_y: f64,
    pub mu_x: f64,
    pub mu_y: f64,
    /// Also penalize the filter's commutators with the covariances in step 1.
    pub augment_filter_step: bool,
}

impl StationarityData {
    pub fn new(c_x: DMatrix<f64>, c_y: DMatrix<f64>, mu_x: f64, mu_y: f64) -> Self {
        StationarityData { c_x, c_y, eps_x: f64::INFINITY, eps_y: f64::INFINITY, mu_x, mu_y, augment_filter_step: false }
    }

    fn validate(&self, n: usize) -> Result<()> {
        for (c, name) in [(&self.c_x, "c_x"), (&self.c_y, "c_y")] {
            if c.nrows() != n || c.ncols() != n {
                return Err(RgspError::DimensionMismatch(format!("{name} is {}x{}, expected {n}x{n}", c.nrows(), c.ncols())));
            }
        }
        for (v, name) in [(self.mu_x, "mu_x"), (self.mu_y, "mu_y")] {
            if !v.is_finite() || v < 0.0 {
                return Err(RgspError::InvalidParams(format!("{name} = {v} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// Input-output data and penalties for one robust identification problem.
#[derive(Debug, Clone)]
pub struct RfiProblem {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub s_bar: Gso,
    pub lambda: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub constraint: GsoConstraint,
    pub stationarity: Option<StationarityData>,
}

impl RfiProblem {
    /// Problem with the default synthetic-benchmark weights.
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>, s_bar: Gso) -> Self {
        let w = RfiWeights::default();
        RfiProblem {
            x,
            y,
            s_bar,
            lambda: w.lambda,
            beta: w.beta,
            gamma: w.gamma,
            delta1: w.delta1,
            delta2: w.delta2,
            constraint: GsoConstraint::Adjacency,
            stationarity: None,
        }
    }

    pub fn weights(&self) -> RfiWeights {
        RfiWeights { lambda: self.lambda, beta: self.beta, gamma: self.gamma, delta1: self.delta1, delta2: self.delta2 }
    }

    fn validate(&self) -> Result<()> {
        self.weights().validate()?;
        let n = self.s_bar.n();
        if self.x.nrows() != n || self.y.nrows() != n {
            return Err(RgspError::DimensionMismatch(format!(
                "signals have {} / {} rows, operator has {n} nodes",
                self.x.nrows(),
                self.y.nrows()
            )));
        }
        if self.x.ncols() != self.y.ncols() || self.x.ncols() == 0 {
            return Err(RgspError::DimensionMismatch(format!(
                "X has {} columns, Y has {}",
                self.x.ncols(),
                self.y.ncols()
            )));
        }
        if let Some(st) = &self.stationarity {
            st.validate(n)?;
        }
        Ok(())
    }
}

/// Which alternating scheme carries out the two steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RfiAlgorithm {
    /// Closed-form filter step and reference (many-pass) graph step.
    Alg2,
    /// Gradient filter step and a fixed budget of coordinate sweeps.
    Alg3,
}

/// Geometric ramp for the commutativity weight across outer iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaSchedule {
    pub gamma0: f64,
    pub rho: f64,
    pub gamma_max: f64,
}

impl GammaSchedule {
    pub fn new(gamma0: f64, gamma_max: f64) -> Self {
        GammaSchedule { gamma0, rho: 1.5, gamma_max }
    }

    pub fn gamma_at(&self, t: usize) -> f64 {
        (self.gamma0 * self.rho.powi(t as i32)).min(self.gamma_max)
    }
}

/// Iteration budgets and optional overrides for the alternating solvers.
#[derive(Debug, Clone, Default)]
pub struct RfiOptions {
    pub t_max: usize,
    /// Gradient steps per filter update (Alg3 only).
    pub tau_max1: usize,
    /// Coordinate sweeps per graph update (Alg3 only; Alg2 runs to tolerance).
    pub tau_max2: usize,
    /// Gradient step size; `None` derives 0.9 over the curvature bound.
    pub mu: Option<f64>,
    /// Starting operator; defaults to the observed copy.
    pub s_init: Option<DMatrix<f64>>,
    pub gamma_schedule: Option<GammaSchedule>,
}

impl RfiOptions {
    pub fn new() -> Self {
        RfiOptions { t_max: 10, tau_max1: 50, tau_max2: 50, mu: None, s_init: None, gamma_schedule: None }
    }
}

/// Entrywise linearization weights of the two log penalties at an iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightState {
    pub omega: DMatrix<f64>,
    pub omega_bar: DMatrix<f64>,
}

impl ReweightState {
    /// Weights 1/(|S_ij| + delta2) and 1/(|S_ij - S_bar_ij| + delta1).
    pub fn from_iterate(s: &DMatrix<f64>, s_bar: &DMatrix<f64>, delta1: f64, delta2: f64) -> Result<ReweightState> {
        if s.shape() != s_bar.shape() {
            return Err(RgspError::DimensionMismatch(format!("{:?} vs {:?}", s.shape(), s_bar.shape())));
        }
        if delta1.is_nan() || delta1 <= 0.0 || delta2.is_nan() || delta2 <= 0.0 {
            return Err(RgspError::InvalidParams("delta1 and delta2 must be positive".into()));
        }
        let omega = s.map(|v| 1.0 / (v.abs() + delta2));
        let omega_bar = DMatrix::from_fn(s.nrows(), s.ncols(), |i, j| 1.0 / ((s[(i, j)] - s_bar[(i, j)]).abs() + delta1));
        Ok(ReweightState { omega, omega_bar })
    }
}

/// Outcome of one closed-form filter step.
#[derive(Debug, Clone)]
pub struct Step1Solve {
    pub h: DMatrix<f64>,
    /// The normal-equation matrix was singular and a minimum-norm solve was used.
    pub singular: bool,
    /// Relative residual of the normal equations at the returned filter.
    pub rel_residual: f64,
}

/// Instrumentation counters for the coordinate-descent graph step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CdStats {
    pub sweeps: usize,
    /// Multiply-accumulate touches in the per-coordinate inner products.
    pub dot_ops: u64,
    pub max_sweep_dot_ops: u64,
}

/// Polynomial coefficients regressed from a (filter, operator) pair.
#[derive(Debug, Clone)]
pub struct CoeffFit {
    pub h: DVector<f64>,
    /// Frobenius norm of H minus the fitted polynomial.
    pub residual: f64,
    pub basis_cond: f64,
    /// Power-basis condition number above 1e12; coefficients are unreliable.
    pub ill_conditioned: bool,
}

/// Per-iteration diagnostics of an alternating solve.
#[derive(Debug, Clone)]
pub struct SolverReport {
    /// True penalized objective after each outer iteration.
    pub objective: Vec<f64>,
    /// Surrogate value [before step 1, after step 1, after step 2] per
    /// iteration, under that iteration's fixed linearization weights. The
    /// first entry is NaN when the iteration had no incoming filter.
    pub majorized: Vec<[f64; 3]>,
    /// Relative normal-equation residual of the filter step (max over filters).
    pub step1_residual: Vec<f64>,
    pub step2_sweeps: Vec<usize>,
    /// Cumulative wall clock at the end of each outer iteration.
    pub seconds: Vec<f64>,
    pub gamma_used: Vec<f64>,
    pub h_trace: Vec<Vec<DMatrix<f64>>>,
    pub s_trace: Vec<DMatrix<f64>>,
    /// Scaled first-order optimality violation at the final iterate.
    pub stationarity_residual: f64,
    /// Squared commutator norms [with c_x, with c_y] of the final operator.
    pub stationarity_commutators: Option<[f64; 2]>,
    pub singular_step1: bool,
    pub wall_seconds: f64,
}

impl SolverReport {
    fn new() -> Self {
        SolverReport {
            objective: Vec::new(),
            majorized: Vec::new(),
            step1_residual: Vec::new(),
            step2_sweeps: Vec::new(),
            seconds: Vec::new(),
            gamma_used: Vec::new(),
            h_trace: Vec::new(),
            s_trace: Vec::new(),
            stationarity_residual: f64::NAN,
            stationarity_commutators: None,
            singular_step1: false,
            wall_seconds: 0.0,
        }
    }
}

/// Filter, denoised operator, and extracted coefficients.
#[derive(Debug, Clone)]
pub struct RfiSolution {
    pub h: DMatrix<f64>,
    pub s: Gso,
    pub coeffs: CoeffFit,
    pub report: SolverReport,
}

/// One observation pair for joint identification, with confidence alpha.
#[derive(Debug, Clone)]
pub struct FilterData {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub alpha: f64,
}

/// Filters sharing one denoised operator.
#[derive(Debug, Clone)]
pub struct JointRfiSolution {
    pub filters: Vec<DMatrix<f64>>,
    pub s: Gso,
    pub report: SolverReport,
}

/// Uniqueness diagnostics for the filter given (S, X).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentifiabilityReport {
    /// Smallest pairwise eigenvalue separation of S.
    pub min_eigengap: f64,
    /// Smallest over frequencies of the strongest excitation across inputs.
    pub min_excitation: f64,
    pub identifiable: bool,
}

const SA_TOL: f64 = 1e-12;
const STEP1_RESIDUAL_TOL: f64 = 1e-8;
const STEP1_DENSE_LIMIT: usize = 12_000;
const ALG2_SWEEP_CAP: usize = 400_000;
const ALG2_VIOLATION_TOL: f64 = 1e-7;
/// Optimality violation small enough to stop sweeping on its own, even while
/// coordinates still drift along a near-flat valley of the quadratic.
const CD_KKT_EXIT: f64 = 1e-9;

fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            pairs.push((i, j));
        }
    }
    pairs
}

/// Admit a matrix into the adjacency constraint set, snapping roundoff-level
/// asymmetry, diagonal, and negativity to exact feasibility.
fn project_sa(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(RgspError::DimensionMismatch(format!("{what} is {}x{}", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    let tol = SA_TOL * scale;
    let mut out = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        if m[(i, i)].abs() > tol {
            return Err(RgspError::InvalidParams(format!("{what} has nonzero diagonal entry at {i}")));
        }
        for j in i + 1..n {
            let a = m[(i, j)];
            let b = m[(j, i)];
            if (a - b).abs() > tol {
                return Err(RgspError::InvalidParams(format!("{what} is asymmetric at ({i}, {j})")));
            }
            let v = 0.5 * (a + b);
            if v < -tol {
                return Err(RgspError::InvalidParams(format!("{what} has negative entry at ({i}, {j})")));
            }
            let v = v.max(0.0);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Step 1: filter update with fixed operator.
// ---------------------------------------------------------------------------

/// Normal-equation matrix of min ||Y - HX||_F^2 + sum_t w_t ||M_t H - H M_t||_F^2
/// over vec(H): (XX^T + sum w MM^T) (x) I + I (x) (sum w M^T M)
/// - sum w (M^T (x) M^T + M (x) M), filled in place without Kronecker temporaries.
fn normal_matrix(xxt: &DMatrix<f64>, terms: &[(f64, &DMatrix<f64>)]) -> DMatrix<f64> {
    let n = xxt.nrows();
    let mut p = xxt.clone();
    let mut g = DMatrix::<f64>::zeros(n, n);
    for &(w, m) in terms {
        p += w * (m * m.transpose());
        g += w * (m.transpose() * m);
    }
    let nsq = n * n;
    let mut a = DMatrix::<f64>::zeros(nsq, nsq);
    for c2 in 0..n {
        for r2 in 0..n {
            let col = c2 * n + r2;
            let mut acol = a.column_mut(col);
            for c1 in 0..n {
                acol[c1 * n + r2] += p[(c1, c2)];
            }
            for r1 in 0..n {
                acol[c2 * n + r1] += g[(r1, r2)];
            }
            for &(w, m) in terms {
                for c1 in 0..n {
                    let am = w * m[(c2, c1)];
                    let bm = w * m[(c1, c2)];
                    if am == 0.0 && bm == 0.0 {
                        continue;
                    }
                    let base = c1 * n;
                    for r1 in 0..n {
                        acol[base + r1] -= am * m[(r2, r1)] + bm * m[(r1, r2)];
                    }
                }
            }
        }
    }
    a
}

/// Apply the normal-equation matrix to vec(H) without materializing it.
fn normal_apply(h: &DMatrix<f64>, xxt: &DMatrix<f64>, terms: &[(f64, &DMatrix<f64>)]) -> DVector<f64> {
    let mut out = h * xxt;
    for &(w, m) in terms {
        let k = m * h - h * m;
        out += w * (m.transpose() * &k - &k * m.transpose());
    }
    la::vec_of(&out)
}

fn closed_form_core(xxt: &DMatrix<f64>, yxt: &DMatrix<f64>, terms: &[(f64, &DMatrix<f64>)]) -> Result<Step1Solve> {
    let n = xxt.nrows();
    let nsq = n * n;
    if nsq > STEP1_DENSE_LIMIT {
        return Err(RgspError::InvalidParams(format!(
            "closed-form filter step forms a {nsq}x{nsq} system; use the gradient step at this size"
        )));
    }
    let b = la::vec_of(yxt);
    let bnorm = b.norm().max(1e-300);
    let a = normal_matrix(xxt, terms);
    let bm = DMatrix::from_column_slice(nsq, 1, b.as_slice());
    let (hvec, mut singular) = match lapack::solve_spd(a, bm) {
        Ok(sol) => (DVector::from_column_slice(sol.as_slice()), false),
        Err(_) => {
            let a = normal_matrix(xxt, terms);
            (la::pinv(&a) * &b, true)
        }
    };
    let mut h = la::unvec(&hvec, n, n);
    let mut rel = (normal_apply(&h, xxt, terms) - &b).norm() / bnorm;
    if !singular && rel > STEP1_RESIDUAL_TOL {
        let a = normal_matrix(xxt, terms);
        let hvec = la::pinv(&a) * &b;
        h = la::unvec(&hvec, n, n);
        rel = (normal_apply(&h, xxt, terms) - &b).norm() / bnorm;
        singular = true;
    }
    Ok(Step1Solve { h, singular, rel_residual: rel })
}

fn step1_dims(s_fixed: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<usize> {
    let n = s_fixed.nrows();
    if s_fixed.ncols() != n {
        return Err(RgspError::DimensionMismatch(format!("operator is {}x{}", s_fixed.nrows(), s_fixed.ncols())));
    }
    if x.nrows() != n || y.nrows() != n || x.ncols() != y.ncols() || x.ncols() == 0 {
        return Err(RgspError::DimensionMismatch(format!(
            "X is {}x{}, Y is {}x{}, operator has {n} nodes",
            x.nrows(),
            x.ncols(),
            y.nrows(),
            y.ncols()
        )));
    }
    Ok(n)
}

/// Filter update with S fixed: solve the dense normal equations of the
/// data term plus the commutativity coupling. Falls back to a minimum-norm
/// pseudoinverse solve (flagged `singular`) when the system is not positive
/// definite or leaves a residual above 1e-8 relative.
pub fn rfi_step1_closed_form(s_fixed: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>, gamma: f64) -> Result<Step1Solve> {
    step1_dims(s_fixed, x, y)?;
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(RgspError::InvalidParams(format!("gamma = {gamma} must be finite and nonnegative")));
    }
    let xxt = x * x.transpose();
    let yxt = y * x.transpose();
    let mut terms: Vec<(f64, &DMatrix<f64>)> = Vec::new();
    if gamma > 0.0 {
        terms.push((gamma, s_fixed));
    }
    closed_form_core(&xxt, &yxt, &terms)
}

fn gradient_core(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    terms: &[(f64, &DMatrix<f64>)],
    h_init: &DMatrix<f64>,
    mu: Option<f64>,
    tau_max1: usize,
) -> Result<DMatrix<f64>> {
    let xxt = x * x.transpose();
    let yxt = y * x.transpose();
    let f1 = |h: &DMatrix<f64>| -> f64 {
        let mut v = (y - h * x).norm_squared();
        for &(w, m) in terms {
            v += w * (m * h - h * m).norm_squared();
        }
        v
    };
    let mu0 = match mu {
        Some(m) if m.is_finite() && m > 0.0 => m,
        Some(m) => return Err(RgspError::InvalidParams(format!("step size mu = {m} must be positive"))),
        None => {
            let mut lam_hat = 2.0 * la::spectral_norm(&xxt);
            for &(w, m) in terms {
                let sm = la::spectral_norm(m);
                lam_hat += 8.0 * w * sm * sm;
            }
            if lam_hat > 0.0 {
                0.9 / lam_hat
            } else {
                1.0
            }
        }
    };
    let f_init = f1(h_init);
    let guard = 10.0 * f_init + 1e-9 * (1.0 + y.norm_squared());
    let mut mu_t = mu0;
    for _ in 0..6 {
        let mut h = h_init.clone();
        let mut diverged = false;
        for _ in 0..tau_max1 {
            let mut grad = 2.0 * (&h * &xxt - &yxt);
            for &(w, m) in terms {
                let k = m * &h - &h * m;
                grad += (2.0 * w) * (m.transpose() * &k - &k * m.transpose());
            }
            h -= mu_t * grad;
            let f = f1(&h);
            if !f.is_finite() || f > guard {
                diverged = true;
                break;
            }
        }
        if !diverged {
            return Ok(h);
        }
        mu_t *= 0.5;
    }
    Err(RgspError::Divergence(format!(
        "gradient filter step still grows the objective after 5 step-size halvings from mu = {mu0:.3e}"
    )))
}

/// Filter update by `tau_max1` gradient steps on the data term plus the
/// commutativity coupling. `mu = None` uses 0.9 over the curvature bound
/// 2 sigma_max(XX^T) + 8 gamma sigma_max(S)^2; on a 10x objective blowup the
/// step is halved and the loop restarted, at most five times.
pub fn rfi_step1_gradient(
    s_fixed: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    gamma: f64,
    h_init: &DMatrix<f64>,
    mu: Option<f64>,
    tau_max1: usize,
) -> Result<DMatrix<f64>> {
    let n = step1_dims(s_fixed, x, y)?;
    if h_init.nrows() != n || h_init.ncols() != n {
        return Err(RgspError::DimensionMismatch(format!("H_init is {}x{}", h_init.nrows(), h_init.ncols())));
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(RgspError::InvalidParams(format!("gamma = {gamma} must be finite and nonnegative")));
    }
    let mut terms: Vec<(f64, &DMatrix<f64>)> = Vec::new();
    if gamma > 0.0 {
        terms.push((gamma, s_fixed));
    }
    gradient_core(x, y, &terms, h_init, mu, tau_max1)
}

// ---------------------------------------------------------------------------
// Step 2: graph update with filters fixed (tied-pair coordinate descent).
// ---------------------------------------------------------------------------

/// Sparse merged column of one commutator term for a tied pair (i, j):
/// the columns of M^T (+) (-M) at vec indices (j, i) and (i, j) summed.
struct PairCol {
    rows: Vec<u32>,
    vals: Vec<f64>,
    norm_sq: f64,
}

fn build_pair_cols(m: &DMatrix<f64>, pairs: &[(usize, usize)]) -> Vec<PairCol> {
    let n = m.nrows();
    let mut acc = vec![0.0f64; n * n];
    let mut seen = vec![false; n * n];
    let mut touched: Vec<u32> = Vec::with_capacity(4 * n);
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        touched.clear();
        let add = |row: usize, v: f64, acc: &mut [f64], seen: &mut [bool], touched: &mut Vec<u32>| {
            if v == 0.0 {
                return;
            }
            if !seen[row] {
                seen[row] = true;
                touched.push(row as u32);
            }
            acc[row] += v;
        };
        for c in 0..n {
            add(c * n + i, m[(j, c)], &mut acc, &mut seen, &mut touched);
            add(c * n + j, m[(i, c)], &mut acc, &mut seen, &mut touched);
        }
        for r in 0..n {
            add(j * n + r, -m[(r, i)], &mut acc, &mut seen, &mut touched);
            add(i * n + r, -m[(r, j)], &mut acc, &mut seen, &mut touched);
        }
        let mut rows = Vec::with_capacity(touched.len());
        let mut vals = Vec::with_capacity(touched.len());
        let mut norm_sq = 0.0;
        for &row in &touched {
            let v = acc[row as usize];
            acc[row as usize] = 0.0;
            seen[row as usize] = false;
            if v != 0.0 {
                rows.push(row);
                vals.push(v);
                norm_sq += v * v;
            }
        }
        out.push(PairCol { rows, vals, norm_sq });
    }
    out
}

/// Exact minimizer over v >= 0 of lw |v - sb| + bw v + (a/2) v^2 + c v.
///
/// This is the scalar problem each coordinate update solves: `a` is the
/// curvature of the quadratic coupling restricted to the coordinate, `c` its
/// linear term, `lw`/`bw` the (already weight-multiplied) l1 coefficients,
/// and `sb` the observed-operator entry. With a = 0 the quadratic is absent
/// and the optimum sits at sb when lw dominates, else at 0.
pub fn cd_scalar_argmin(a: f64, c: f64, lw: f64, bw: f64, sb: f64) -> f64 {
    if a <= 0.0 {
        return if lw > bw + c { sb.max(0.0) } else { 0.0 };
    }
    let lam = lw / a;
    let u = (-bw - c) / a;
    if sb < u - lam {
        (u - lam).max(0.0)
    } else if sb > u + lam {
        (u + lam).max(0.0)
    } else {
        sb.max(0.0)
    }
}

/// Scaled distance of 0 from the subdifferential of the coordinate restriction.
fn pair_violation(a: f64, c: f64, owb: f64, ow: f64, sb: f64, v: f64) -> f64 {
    let q = a * v + c + ow;
    let (lo, hi) = if (v - sb).abs() <= 1e-12 * (1.0 + sb.abs()) {
        (-owb, owb)
    } else if v > sb {
        (owb, owb)
    } else {
        (-owb, -owb)
    };
    let (ilo, ihi) = (q + lo, q + hi);
    let raw = if v > 0.0 {
        if ilo > 0.0 {
            ilo
        } else if ihi < 0.0 {
            -ihi
        } else {
            0.0
        }
    } else {
        (-ihi).max(0.0)
    };
    raw / (1.0 + a + owb + ow)
}

struct CdSettings {
    max_sweeps: usize,
    /// Converged when no coordinate moves more than this in a sweep.
    tol_change: Option<f64>,
    /// Additionally require the optimality violation below this.
    viol_tol: Option<f64>,
}

struct CdOutcome {
    s: DMatrix<f64>,
    stats: CdStats,
    converged: bool,
}

struct CdDots<'a> {
    weights: Vec<f64>,
    cols: Vec<Vec<PairCol>>,
    resid: Vec<DVector<f64>>,
    terms: Vec<&'a DMatrix<f64>>,
    curv: Vec<f64>,
}

impl<'a> CdDots<'a> {
    fn new(s: &DMatrix<f64>, terms: &[(f64, &'a DMatrix<f64>)], pairs: &[(usize, usize)]) -> Self {
        let weights: Vec<f64> = terms.iter().map(|&(w, _)| w).collect();
        let cols: Vec<Vec<PairCol>> = terms.iter().map(|&(_, m)| build_pair_cols(m, pairs)).collect();
        let resid: Vec<DVector<f64>> = terms.iter().map(|&(_, m)| la::vec_of(&(s * m - m * s))).collect();
        let curv: Vec<f64> = (0..pairs.len())
            .map(|p| {
                let mut a = 0.0;
                for (t, w) in weights.iter().enumerate() {
                    a += 2.0 * w * cols[t][p].norm_sq;
                }
                a
            })
            .collect();
        let mats: Vec<&DMatrix<f64>> = terms.iter().map(|&(_, m)| m).collect();
        CdDots { weights, cols, resid, terms: mats, curv }
    }

    /// 2 sum_t w_t sigma_{t,p}^T r_t, counting multiply-accumulate touches.
    fn dot(&self, p: usize, ops: &mut u64) -> f64 {
        let mut total = 0.0;
        for (t, term_cols) in self.cols.iter().enumerate() {
            let col = &term_cols[p];
            let r = &self.resid[t];
            let mut d = 0.0;
            for (&row, &val) in col.rows.iter().zip(&col.vals) {
                d += val * r[row as usize];
            }
            total += 2.0 * self.weights[t] * d;
            *ops += col.rows.len() as u64;
        }
        total
    }

    fn shift(&mut self, p: usize, delta: f64) {
        for (t, term_cols) in self.cols.iter().enumerate() {
            let col = &term_cols[p];
            let r = &mut self.resid[t];
            for (&row, &val) in col.rows.iter().zip(&col.vals) {
                r[row as usize] += val * delta;
            }
        }
    }

    fn refresh(&mut self, s: &DMatrix<f64>) {
        for (t, m) in self.terms.iter().enumerate() {
            self.resid[t] = la::vec_of(&(s * *m - *m * s));
        }
    }
}

/// One exact line search along the displacement accumulated since `snap`.
///
/// When the quadratic couples coordinates through a near-singular operator
/// (stiff commutator penalties), cyclic sweeps crawl along a slowly rotating
/// direction. The composite objective restricted to that ray is convex with
/// analytic quadratic coefficients and piecewise-linear l1 terms, so a line
/// search is cheap and collapses the crawl. Returns true if `s` moved.
#[allow(clippy::too_many_arguments)]
fn ray_accelerate(
    s: &mut DMatrix<f64>,
    snap: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    lambda: f64,
    beta: f64,
    terms: &[(f64, &DMatrix<f64>)],
    omega: &DMatrix<f64>,
    omega_bar: &DMatrix<f64>,
) -> bool {
    let n = s.nrows();
    let mut d = &*s - snap;
    let mut theta_max = 1e12f64;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // coordinates resting exactly on a kink stay put: perturbing them
            // off the subdifferential rest point just feeds a ray/sweep cycle
            if s[(i, j)] == 0.0 || s[(i, j)] == s_bar[(i, j)] {
                d[(i, j)] = 0.0;
            } else if d[(i, j)] < 0.0 {
                theta_max = theta_max.min(-s[(i, j)] / d[(i, j)]);
            }
        }
    }
    if theta_max <= 0.0 || d.iter().all(|&v| v == 0.0) {
        return false;
    }
    let coef: Vec<(f64, f64, f64, f64)> = terms
        .iter()
        .map(|&(w, m)| {
            let a = &*s * m - m * &*s;
            let b = &d * m - m * &d;
            (w, a.norm_squared(), a.dot(&b), b.norm_squared())
        })
        .collect();
    let ray = |th: f64| -> f64 {
        let mut f = 0.0;
        for &(w, aa, ab, bb) in &coef {
            f += w * (aa + 2.0 * th * ab + th * th * bb);
        }
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let v = s[(i, j)] + th * d[(i, j)];
                    f += lambda * omega_bar[(i, j)] * (v - s_bar[(i, j)]).abs() + beta * omega[(i, j)] * v.abs();
                }
            }
        }
        f
    };
    let f0 = ray(0.0);
    let mut best_t = 0.0;
    let mut best_f = f0;
    let mut t = theta_max;
    for _ in 0..64 {
        let ft = ray(t);
        if ft < best_f {
            best_f = ft;
            best_t = t;
        }
        t *= 0.5;
        if t < 1e-12 {
            break;
        }
    }
    if best_t == 0.0 {
        return false;
    }
    let th = la::golden_min(ray, 0.5 * best_t, (2.0 * best_t).min(theta_max), 1e-6 * best_t);
    let (th, fth) = if ray(th) < best_f { (th, ray(th)) } else { (best_t, best_f) };
    if fth >= f0 - 1e-12 * (1.0 + f0.abs()) {
        return false;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (s[(i, j)] + th * d[(i, j)]).max(0.0);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
    }
    true
}

#[allow(clippy::too_many_arguments)]
fn cd_run(
    s_init: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    lambda: f64,
    beta: f64,
    terms: &[(f64, &DMatrix<f64>)],
    omega: &DMatrix<f64>,
    omega_bar: &DMatrix<f64>,
    cfg: &CdSettings,
) -> CdOutcome {
    let n = s_bar.nrows();
    let pairs = upper_pairs(n);
    let mut dots = CdDots::new(s_init, terms, &pairs);
    let mut s = s_init.clone();
    let mut stats = CdStats::default();
    let mut converged = cfg.tol_change.is_none();
    let mut snap = cfg.tol_change.map(|_| s.clone());
    // line searches perturb the iterate; once sweeps are nearly settled they
    // do more harm than good, so freeze them and let plain sweeps finish
    let mut ray_active = true;
    for sweep in 0..cfg.max_sweeps {
        let mut sweep_ops: u64 = 0;
        let mut max_change = 0.0f64;
        for (p, &(i, j)) in pairs.iter().enumerate() {
            let cur = s[(i, j)];
            let a = dots.curv[p];
            let c = dots.dot(p, &mut sweep_ops) - a * cur;
            let owb = lambda * (omega_bar[(i, j)] + omega_bar[(j, i)]);
            let ow = beta * (omega[(i, j)] + omega[(j, i)]);
            let v = cd_scalar_argmin(a, c, owb, ow, s_bar[(i, j)]);
            let delta = v - cur;
            if delta != 0.0 {
                dots.shift(p, delta);
                s[(i, j)] = v;
                s[(j, i)] = v;
                if delta.abs() > max_change {
                    max_change = delta.abs();
                }
            }
        }
        stats.sweeps = sweep + 1;
        stats.dot_ops += sweep_ops;
        if sweep_ops > stats.max_sweep_dot_ops {
            stats.max_sweep_dot_ops = sweep_ops;
        }
        if sweep % 256 == 255 {
            dots.refresh(&s);
        }
        if let Some(tol) = cfg.tol_change {
            if max_change <= tol {
                let ok = match cfg.viol_tol {
                    Some(vt) => cd_max_violation(&s, s_bar, lambda, beta, omega, omega_bar, &dots, &pairs) <= vt,
                    None => true,
                };
                if ok {
                    converged = true;
                    break;
                }
            }
        }
        if cfg.viol_tol.is_some()
            && sweep % 64 == 31
            && cd_max_violation(&s, s_bar, lambda, beta, omega, omega_bar, &dots, &pairs) <= CD_KKT_EXIT
        {
            converged = true;
            break;
        }
        if let Some(snap) = snap.as_mut() {
            if let Some(tol) = cfg.tol_change {
                if max_change <= 50.0 * tol {
                    ray_active = false;
                }
            }
            if ray_active && sweep % 16 == 15 {
                let moved = ray_accelerate(&mut s, snap, s_bar, lambda, beta, terms, omega, omega_bar);
                if moved {
                    dots.refresh(&s);
                }
                snap.copy_from(&s);
            }
            }
    }
    CdOutcome { s, stats, converged }
}

#[allow(clippy::too_many_arguments)]
fn cd_max_violation(
    s: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    lambda: f64,
    beta: f64,
    omega: &DMatrix<f64>,
    omega_bar: &DMatrix<f64>,
    dots: &CdDots,
    pairs: &[(usize, usize)],
) -> f64 {
    let mut ops = 0u64;
    let mut worst = 0.0f64;
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let cur = s[(i, j)];
        let a = dots.curv[p];
        let c = dots.dot(p, &mut ops) - a * cur;
        let owb = lambda * omega_sum(omega_bar, i, j);
        let ow = beta * omega_sum(omega, i, j);
        let viol = pair_violation(a, c, owb, ow, s_bar[(i, j)], cur);
        if viol > worst {
            worst = viol;
        }
    }
    worst
}

fn omega_sum(m: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    m[(i, j)] + m[(j, i)]
}

/// Graph update: exactly `tau_max2` cyclic sweeps of tied-pair coordinate
/// descent from `prev_s`, using the supplied linearization weights.
#[allow(clippy::too_many_arguments)]
pub fn rfi_step2_cd(
    h_fixed: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    prev_s: &DMatrix<f64>,
    lambda: f64,
    beta: f64,
    gamma: f64,
    omega: &DMatrix<f64>,
    omega_bar: &DMatrix<f64>,
    tau_max2: usize,
) -> Result<DMatrix<f64>> {
    rfi_step2_cd_instrumented(h_fixed, s_bar, prev_s, lambda, beta, gamma, omega, omega_bar, tau_max2).map(|(s, _)| s)
}

/// `rfi_step2_cd` with sweep and operation counters.
#[allow(clippy::too_many_arguments)]
pub fn rfi_step2_cd_instrumented(
    h_fixed: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    prev_s: &DMatrix<f64>,
    lambda: f64,
    beta: f64,
    gamma: f64,
    omega: &DMatrix<f64>,
    omega_bar: &DMatrix<f64>,
    tau_max2: usize,
) -> Result<(DMatrix<f64>, CdStats)> {
    let (s_bar, prev_s) = step2_inputs(h_fixed, s_bar, Some(prev_s), lambda, beta, gamma, omega, omega_bar)?;
    if tau_max2 == 0 {
        return Err(RgspError::InvalidParams("tau_max2 must be at least 1".into()));
    }
    let mut terms: Vec<(f64, &DMatrix<f64>)> = Vec::new();
    if gamma > 0.0 {
        terms.push((gamma, h_fixed));
    }
    let cfg = CdSettings { max_sweeps: tau_max2, tol_change: None, viol_tol: None };
    let out = cd_run(&prev_s, &s_bar, lambda, beta, &terms, omega, omega_bar, &cfg);
    Ok((out.s, out.stats))
}

/// Reference graph update: coordinate descent run to stationarity (coordinate
/// changes below tolerance and scaled optimality violation below 1e-7),
/// starting from the observed operator.
pub fn rfi_step2_exact(
    h_fixed: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    omega: &DMatrix<f64>,
    omega_bar: &DMatrix<f64>,
    lambda: f64,
    beta: f64,
    gamma: f64,
) -> Result<DMatrix<f64>> {
    let (s_bar, init) = step2_inputs(h_fixed, s_bar, None, lambda, beta, gamma, omega, omega_bar)?;
    let mut terms: Vec<(f64, &DMatrix<f64>)> = Vec::new();
    if gamma > 0.0 {
        terms.push((gamma, h_fixed));
    }
    let cfg = CdSettings {
        max_sweeps: ALG2_SWEEP_CAP,
        tol_change: Some(1e-10 * (1.0 + s_bar.amax())),
        viol_tol: Some(ALG2_VIOLATION_TOL),
    };
    let out = cd_run(&init, &s_bar, lambda, beta, &terms, omega, omega_bar, &cfg);
    if !out.converged {
        return Err(RgspError::NonConvergence(format!(
            "graph update still moving after {ALG2_SWEEP_CAP} coordinate sweeps"
        )));
    }
    Ok(out.s)
}

#[allow(clippy::too_many_arguments)]
fn step2_inputs(
    h_fixed: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    prev_s: Option<&DMatrix<f64>>,
    lambda: f64,
    beta: f64,
    gamma: f64,
    omega: &DMatrix<f64>,
    omega_bar: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = s_bar.nrows();
    if h_fixed.nrows() != n || h_fixed.ncols() != n {
        return Err(RgspError::DimensionMismatch(format!("H is {}x{}, operator has {n} nodes", h_fixed.nrows(), h_fixed.ncols())));
    }
    for (v, name) in [(lambda, "lambda"), (beta, "beta"), (gamma, "gamma")] {
        if !v.is_finite() || v < 0.0 {
            return Err(RgspError::InvalidParams(format!("{name} = {v} must be finite and nonnegative")));
        }
    }
    for (m, name) in [(omega, "omega"), (omega_bar, "omega_bar")] {
        if m.nrows() != n || m.ncols() != n {
            return Err(RgspError::DimensionMismatch(format!("{name} is {}x{}", m.nrows(), m.ncols())));
        }
        if m.iter().any(|&v| !v.is_finite() || v <= 0.0) {
            return Err(RgspError::InvalidParams(format!("{name} must be entrywise positive")));
        }
    }
    let s_bar = project_sa(s_bar, "s_bar")?;
    let init = match prev_s {
        Some(m) => project_sa(m, "prev_s")?,
        None => s_bar.clone(),
    };
    Ok((s_bar, init))
}

// ---------------------------------------------------------------------------
// Objectives, certificates, and the alternating engine.
// ---------------------------------------------------------------------------

/// Penalized objective: data term + lambda log-pull toward the observed
/// operator + beta log-sparsity + gamma commutator coupling.
pub fn rfi_objective(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    h: &DMatrix<f64>,
    s: &DMatrix<f64>,
    w: &RfiWeights,
) -> Result<f64> {
    let n = step1_dims(s, x, y)?;
    if s_bar.nrows() != n || s_bar.ncols() != n || h.nrows() != n || h.ncols() != n {
        return Err(RgspError::DimensionMismatch("operator and filter shapes disagree".into()));
    }
    w.validate()?;
    let data = (y - h * x).norm_squared();
    Ok(data + log_penalty(s, s_bar, w) + w.gamma * (s * h - h * s).norm_squared())
}

fn log_penalty(s: &DMatrix<f64>, s_bar: &DMatrix<f64>, w: &RfiWeights) -> f64 {
    let mut v = 0.0;
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            v += w.lambda * ((s[(i, j)] - s_bar[(i, j)]).abs() + w.delta1).ln();
            v += w.beta * (s[(i, j)].abs() + w.delta2).ln();
        }
    }
    v
}

fn l1_surrogate(s: &DMatrix<f64>, s_bar: &DMatrix<f64>, lambda: f64, beta: f64, rw: &ReweightState) -> f64 {
    let mut v = 0.0;
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            v += lambda * rw.omega_bar[(i, j)] * (s[(i, j)] - s_bar[(i, j)]).abs();
            v += beta * rw.omega[(i, j)] * s[(i, j)].abs();
        }
    }
    v
}

/// First-order optimality residual of (H, S) for the plain problem: the
/// relative normal-equation residual of the filter block, and per-pair
/// subgradient violations of the graph block with weights refreshed at S
/// (so the linearized penalty gradient equals the log-penalty gradient).
pub fn rfi_stationarity(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    h: &DMatrix<f64>,
    s: &DMatrix<f64>,
    w: &RfiWeights,
) -> Result<f64> {
    let n = step1_dims(s, x, y)?;
    if s_bar.nrows() != n || s_bar.ncols() != n || h.nrows() != n || h.ncols() != n {
        return Err(RgspError::DimensionMismatch("operator and filter shapes disagree".into()));
    }
    w.validate()?;
    let s_bar = project_sa(s_bar, "s_bar")?;
    let s = project_sa(s, "s")?;
    let xxt = x * x.transpose();
    let yxt = y * x.transpose();
    let mut terms: Vec<(f64, &DMatrix<f64>)> = Vec::new();
    if w.gamma > 0.0 {
        terms.push((w.gamma, &s));
    }
    let b = la::vec_of(&yxt);
    let h_part = (normal_apply(h, &xxt, &terms) - &b).norm() / b.norm().max(1e-300);
    let rw = ReweightState::from_iterate(&s, &s_bar, w.delta1, w.delta2)?;
    let mut terms2: Vec<(f64, &DMatrix<f64>)> = Vec::new();
    if w.gamma > 0.0 {
        terms2.push((w.gamma, h));
    }
    let s_part = graph_violation(&s, &s_bar, w.lambda, w.beta, &terms2, &rw);
    Ok(h_part.max(s_part))
}

fn graph_violation(
    s: &DMatrix<f64>,
    s_bar: &DMatrix<f64>,
    lambda: f64,
    beta: f64,
    terms: &[(f64, &DMatrix<f64>)],
    rw: &ReweightState,
) -> f64 {
    let pairs = upper_pairs(s.nrows());
    let dots = CdDots::new(s, terms, &pairs);
    let mut ops = 0u64;
    let mut worst = 0.0f64;
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let cur = s[(i, j)];
        let a = dots.curv[p];
        let c = dots.dot(p, &mut ops) - a * cur;
        let owb = lambda * omega_sum(&rw.omega_bar, i, j);
        let ow = beta * omega_sum(&rw.omega, i, j);
        let viol = pair_violation(a, c, owb, ow, s_bar[(i, j)], cur);
        if viol > worst {
            worst = viol;
        }
    }
    worst
}

fn data_objective(data: &[(&DMatrix<f64>, &DMatrix<f64>, f64)], filters: &[DMatrix<f64>]) -> f64 {
    let mut v = 0.0;
    for (k, (x, y, alpha)) in data.iter().enumerate() {
        v += alpha * (*y - &filters[k] * *x).norm_squared();
    }
    v
}

fn quad_objective(s: &DMatrix<f64>, terms: &[(f64, &DMatrix<f64>)]) -> f64 {
    let mut v = 0.0;
    for &(w, m) in terms {
        v += w * (s * m - m * s).norm_squared();
    }
    v
}

fn mk_step1_terms<'a>(
    alpha: f64,
    gamma_t: f64,
    s_ref: &'a DMatrix<f64>,
    stat: Option<&'a StationarityData>,
) -> Vec<(f64, &'a DMatrix<f64>)> {
    let mut terms: Vec<(f64, &DMatrix<f64>)> = Vec::new();
    let gk = gamma_t / alpha;
    if gk > 0.0 {
        terms.push((gk, s_ref));
    }
    if let Some(st) = stat {
        if st.augment_filter_step {
            if st.mu_x > 0.0 {
                terms.push((st.mu_x / alpha, &st.c_x));
            }
            if st.mu_y > 0.0 {
                terms.push((st.mu_y / alpha, &st.c_y));
            }
        }
    }
    terms
}

fn mk_step2_terms<'a>(
    gamma_t: f64,
    filters: &'a [DMatrix<f64>],
    stat: Option<&'a StationarityData>,
) -> Vec<(f64, &'a DMatrix<f64>)> {
    let mut terms: Vec<(f64, &DMatrix<f64>)> = Vec::new();
    if gamma_t > 0.0 {
        for h in filters {
            terms.push((gamma_t, h));
        }
    }
    if let Some(st) = stat {
        if st.mu_x > 0.0 {
            terms.push((st.mu_x, &st.c_x));
        }
        if st.mu_y > 0.0 {
            terms.push((st.mu_y, &st.c_y));
        }
    }
    terms
}

fn solve_engine(
    data: &[(&DMatrix<f64>, &DMatrix<f64>, f64)],
    s_bar_g: &Gso,
    w: &RfiWeights,
    stat: Option<&StationarityData>,
    algorithm: RfiAlgorithm,
    opt: &RfiOptions,
) -> Result<(Vec<DMatrix<f64>>, Gso, SolverReport)> {
    let started = Instant::now();
    w.validate()?;
    if data.is_empty() {
        return Err(RgspError::InvalidParams("need at least one observation pair".into()));
    }
    if opt.t_max == 0 {
        return Err(RgspError::InvalidParams("t_max must be at least 1".into()));
    }
    let n = s_bar_g.n();
    let s_bar = project_sa(s_bar_g.matrix(), "s_bar")?;
    for (x, y, alpha) in data {
        if x.nrows() != n || y.nrows() != n || x.ncols() != y.ncols() || x.ncols() == 0 {
            return Err(RgspError::DimensionMismatch(format!(
                "pair has X {}x{}, Y {}x{}, operator {n} nodes",
                x.nrows(),
                x.ncols(),
                y.nrows(),
                y.ncols()
            )));
        }
        if !alpha.is_finite() || *alpha <= 0.0 {
            return Err(RgspError::InvalidParams(format!("alpha = {alpha} must be positive")));
        }
    }
    if let Some(st) = stat {
        st.validate(n)?;
    }
    let mut s = match &opt.s_init {
        Some(m) => project_sa(m, "s_init")?,
        None => s_bar.clone(),
    };
    let kf = data.len();
    let xxt: Vec<DMatrix<f64>> = data.iter().map(|(x, _, _)| *x * x.transpose()).collect();
    let yxt: Vec<DMatrix<f64>> = data.iter().map(|(x, y, _)| *y * x.transpose()).collect();
    let mut filters: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); kf];
    let mut have_prev = matches!(algorithm, RfiAlgorithm::Alg3);
    let mut report = SolverReport::new();
    for t in 0..opt.t_max {
        let gamma_t = match &opt.gamma_schedule {
            Some(gs) => gs.gamma_at(t),
            None => w.gamma,
        };
        let rw = ReweightState::from_iterate(&s, &s_bar, w.delta1, w.delta2)?;
        let surrogate = |hs: &[DMatrix<f64>], sm: &DMatrix<f64>| -> f64 {
            let mut v = data_objective(data, hs) + l1_surrogate(sm, &s_bar, w.lambda, w.beta, &rw);
            for h in hs {
                if gamma_t > 0.0 {
                    v += gamma_t * (sm * h - h * sm).norm_squared();
                }
            }
            if let Some(st) = stat {
                if st.mu_x > 0.0 {
                    v += st.mu_x * (sm * &st.c_x - &st.c_x * sm).norm_squared();
                }
                if st.mu_y > 0.0 {
                    v += st.mu_y * (sm * &st.c_y - &st.c_y * sm).norm_squared();
                }
            }
            v
        };
        let g_before = if have_prev { surrogate(&filters, &s) } else { f64::NAN };

        let mut step1_rel = 0.0f64;
        match algorithm {
            RfiAlgorithm::Alg2 => {
                let solve_one = |ki: usize| -> Result<Step1Solve> {
                    let terms = mk_step1_terms(data[ki].2, gamma_t, &s, stat);
                    closed_form_core(&xxt[ki], &yxt[ki], &terms)
                };
                let solves: Vec<Step1Solve> = if kf > 1 {
                    (0..kf).into_par_iter().map(solve_one).collect::<Result<Vec<_>>>()?
                } else {
                    vec![solve_one(0)?]
                };
                for (ki, sv) in solves.into_iter().enumerate() {
                    if sv.singular {
                        report.singular_step1 = true;
                    }
                    step1_rel = step1_rel.max(sv.rel_residual);
                    filters[ki] = sv.h;
                }
            }
            RfiAlgorithm::Alg3 => {
                for ki in 0..kf {
                    let terms = mk_step1_terms(data[ki].2, gamma_t, &s, stat);
                    filters[ki] = gradient_core(data[ki].0, data[ki].1, &terms, &filters[ki], opt.mu, opt.tau_max1.max(1))?;
                    let b = la::vec_of(&yxt[ki]);
                    let rel = (normal_apply(&filters[ki], &xxt[ki], &terms) - &b).norm() / b.norm().max(1e-300);
                    step1_rel = step1_rel.max(rel);
                }
            }
        }
        let g_mid = surrogate(&filters, &s);

        let terms2 = mk_step2_terms(gamma_t, &filters, stat);
        let cfg = match algorithm {
            RfiAlgorithm::Alg2 => CdSettings {
                max_sweeps: ALG2_SWEEP_CAP,
                tol_change: Some(1e-10 * (1.0 + s_bar.amax())),
                viol_tol: Some(ALG2_VIOLATION_TOL),
            },
            RfiAlgorithm::Alg3 => CdSettings { max_sweeps: opt.tau_max2.max(1), tol_change: None, viol_tol: None },
        };
        let out = cd_run(&s, &s_bar, w.lambda, w.beta, &terms2, &rw.omega, &rw.omega_bar, &cfg);
        if !out.converged {
            return Err(RgspError::NonConvergence(format!(
                "graph update still moving after {} coordinate sweeps",
                cfg.max_sweeps
            )));
        }
        s = out.s;
        let g_after = surrogate(&filters, &s);

        let mut objective = data_objective(data, &filters) + log_penalty(&s, &s_bar, w);
        objective += quad_objective(&s, &terms2);
        report.objective.push(objective);
        report.majorized.push([g_before, g_mid, g_after]);
        report.step1_residual.push(step1_rel);
        report.step2_sweeps.push(out.stats.sweeps);
        report.gamma_used.push(gamma_t);
        report.seconds.push(started.elapsed().as_secs_f64());
        report.h_trace.push(filters.clone());
        report.s_trace.push(s.clone());
        have_prev = true;
    }

    let final_gamma = *report.gamma_used.last().unwrap();
    report.stationarity_residual = {
        let mut worst = 0.0f64;
        for ki in 0..kf {
            let terms = mk_step1_terms(data[ki].2, final_gamma, &s, stat);
            let b = la::vec_of(&yxt[ki]);
            let rel = (normal_apply(&filters[ki], &xxt[ki], &terms) - &b).norm() / b.norm().max(1e-300);
            worst = worst.max(rel);
        }
        let rw = ReweightState::from_iterate(&s, &s_bar, w.delta1, w.delta2)?;
        let terms2 = mk_step2_terms(final_gamma, &filters, stat);
        worst.max(graph_violation(&s, &s_bar, w.lambda, w.beta, &terms2, &rw))
    };
    report.stationarity_commutators = stat.map(|st| {
        [
            (&s * &st.c_x - &st.c_x * &s).norm_squared(),
            (&s * &st.c_y - &st.c_y * &s).norm_squared(),
        ]
    });
    report.wall_seconds = started.elapsed().as_secs_f64();
    let s_gso = Gso::new(s, GsoKind::Adjacency)?;
    Ok((filters, s_gso, report))
}

/// Alternate the filter and graph updates for `t_max` outer iterations,
/// refreshing the linearization weights at each iterate. Any stationarity
/// data on the problem is ignored here; see `rfi_solve_stationary`.
pub fn rfi_solve(problem: &RfiProblem, algorithm: RfiAlgorithm, opt: &RfiOptions) -> Result<RfiSolution> {
    problem.validate()?;
    let w = problem.weights();
    let data = [(&problem.x, &problem.y, 1.0)];
    let (filters, s, report) = solve_engine(&data, &problem.s_bar, &w, None, algorithm, opt)?;
    let h = filters.into_iter().next().unwrap();
    let coeffs = extract_coeffs(&h, &s, s.n())?;
    Ok(RfiSolution { h, s, coeffs, report })
}

/// `rfi_solve` with the covariance commutativity penalties active in the
/// graph step (and, when `augment_filter_step` is set, in the filter step).
pub fn rfi_solve_stationary(problem: &RfiProblem, algorithm: RfiAlgorithm, opt: &RfiOptions) -> Result<RfiSolution> {
    problem.validate()?;
    let st = problem
        .stationarity
        .as_ref()
        .ok_or_else(|| RgspError::InvalidParams("stationarity data required; set RfiProblem::stationarity".into()))?;
    let w = problem.weights();
    let data = [(&problem.x, &problem.y, 1.0)];
    let (filters, s, report) = solve_engine(&data, &problem.s_bar, &w, Some(st), algorithm, opt)?;
    let h = filters.into_iter().next().unwrap();
    let coeffs = extract_coeffs(&h, &s, s.n())?;
    Ok(RfiSolution { h, s, coeffs, report })
}

/// Identify K filters driven by different inputs on one shared operator.
/// The filter step solves the K problems independently (in parallel), each
/// with coupling weight gamma over its confidence alpha; the graph step
/// descends the sum of all K commutator couplings.
pub fn joint_rfi_solve(data: &[FilterData], s_bar: &Gso, weights: &RfiWeights, t_max: usize) -> Result<JointRfiSolution> {
    let refs: Vec<(&DMatrix<f64>, &DMatrix<f64>, f64)> = data.iter().map(|d| (&d.x, &d.y, d.alpha)).collect();
    let opt = RfiOptions { t_max, ..RfiOptions::new() };
    let (filters, s, report) = solve_engine(&refs, s_bar, weights, None, RfiAlgorithm::Alg2, &opt)?;
    Ok(JointRfiSolution { filters, s, report })
}

// ---------------------------------------------------------------------------
// AR time-series identification.
// ---------------------------------------------------------------------------

fn hstack(mats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let nrows = mats[0].nrows();
    let total: usize = mats.iter().map(|m| m.ncols()).sum();
    let mut out = DMatrix::<f64>::zeros(nrows, total);
    let mut at = 0;
    for m in mats {
        out.view_mut((0, at), (nrows, m.ncols())).copy_from(m);
        at += m.ncols();
    }
    out
}

/// Identify the memory-K filters of y_t = sum_k H_k y_{t-k} + x_t together
/// with the denoised operator. Each outer iteration updates the K filters
/// cyclically (each by an exact least-squares solve against the residual
/// left by the others) and then runs the graph update.
pub fn ar_rfi_solve(
    ys: &[DMatrix<f64>],
    xs: Option<&[DMatrix<f64>]>,
    s_bar_g: &Gso,
    memory: usize,
    w: &RfiWeights,
    t_max: usize,
) -> Result<JointRfiSolution> {
    let started = Instant::now();
    w.validate()?;
    if memory == 0 {
        return Err(RgspError::InvalidParams("memory must be at least 1".into()));
    }
    if t_max == 0 {
        return Err(RgspError::InvalidParams("t_max must be at least 1".into()));
    }
    if ys.len() <= memory {
        return Err(RgspError::InvalidParams(format!(
            "need more than {memory} snapshots, got {}",
            ys.len()
        )));
    }
    let n = s_bar_g.n();
    let s_bar = project_sa(s_bar_g.matrix(), "s_bar")?;
    for (t, ym) in ys.iter().enumerate() {
        if ym.nrows() != n || ym.ncols() == 0 {
            return Err(RgspError::DimensionMismatch(format!("snapshot {t} is {}x{}", ym.nrows(), ym.ncols())));
        }
    }
    if let Some(xs) = xs {
        if xs.len() != ys.len() {
            return Err(RgspError::DimensionMismatch(format!("{} inputs vs {} snapshots", xs.len(), ys.len())));
        }
        for (t, xm) in xs.iter().enumerate() {
            if xm.shape() != ys[t].shape() {
                return Err(RgspError::DimensionMismatch(format!("input {t} is {}x{}", xm.nrows(), xm.ncols())));
            }
        }
    }
    let kmax = ys.len();
    // Per-lag regressors are fixed; the target depends on the other filters.
    let xstk: Vec<DMatrix<f64>> = (1..=memory).map(|k| hstack(&ys[memory - k..kmax - k])).collect();
    let xxt_k: Vec<DMatrix<f64>> = xstk.iter().map(|m| m * m.transpose()).collect();
    let base = {
        let slices: Vec<DMatrix<f64>> = (memory..kmax)
            .map(|t| match xs {
                Some(xs) => &ys[t] - &xs[t],
                None => ys[t].clone(),
            })
            .collect();
        hstack(&slices)
    };
    let mut filters: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n, n); memory];
    let mut s = s_bar.clone();
    let mut report = SolverReport::new();
    let data_term = |hs: &[DMatrix<f64>]| -> f64 {
        let mut pred = DMatrix::<f64>::zeros(n, base.ncols());
        for (k, h) in hs.iter().enumerate() {
            pred += h * &xstk[k];
        }
        (&base - pred).norm_squared()
    };
    for _t in 0..t_max {
        let rw = ReweightState::from_iterate(&s, &s_bar, w.delta1, w.delta2)?;
        let surrogate = |hs: &[DMatrix<f64>], sm: &DMatrix<f64>| -> f64 {
            let mut v = data_term(hs) + l1_surrogate(sm, &s_bar, w.lambda, w.beta, &rw);
            for h in hs {
                if w.gamma > 0.0 {
                    v += w.gamma * (sm * h - h * sm).norm_squared();
                }
            }
            v
        };
        let g_before = surrogate(&filters, &s);
        let mut step1_rel = 0.0f64;
        for k in 0..memory {
            let mut tgt = base.clone();
            for k2 in 0..memory {
                if k2 != k {
                    tgt -= &filters[k2] * &xstk[k2];
                }
            }
            let yxt = &tgt * xstk[k].transpose();
            let mut terms: Vec<(f64, &DMatrix<f64>)> = Vec::new();
            if w.gamma > 0.0 {
                terms.push((w.gamma, &s));
            }
            let sv = closed_form_core(&xxt_k[k], &yxt, &terms)?;
            if sv.singular {
                report.singular_step1 = true;
            }
            step1_rel = step1_rel.max(sv.rel_residual);
            filters[k] = sv.h;
        }
        let g_mid = surrogate(&filters, &s);
        let mut terms2: Vec<(f64, &DMatrix<f64>)> = Vec::new();
        if w.gamma > 0.0 {
            for h in &filters {
                terms2.push((w.gamma, h));
            }
        }
        let cfg = CdSettings {
            max_sweeps: ALG2_SWEEP_CAP,
            tol_change: Some(1e-10 * (1.0 + s_bar.amax())),
            viol_tol: Some(ALG2_VIOLATION_TOL),
        };
        let out = cd_run(&s, &s_bar, w.lambda, w.beta, &terms2, &rw.omega, &rw.omega_bar, &cfg);
        if !out.converged {
            return Err(RgspError::NonConvergence(format!(
                "graph update still moving after {} coordinate sweeps",
                cfg.max_sweeps
            )));
        }
        s = out.s;
        let g_after = surrogate(&filters, &s);
        let objective = data_term(&filters) + log_penalty(&s, &s_bar, w) + quad_objective(&s, &terms2);
        report.objective.push(objective);
        report.majorized.push([g_before, g_mid, g_after]);
        report.step1_residual.push(step1_rel);
        report.step2_sweeps.push(out.stats.sweeps);
        report.gamma_used.push(w.gamma);
        report.seconds.push(started.elapsed().as_secs_f64());
        report.h_trace.push(filters.clone());
        report.s_trace.push(s.clone());
    }
    report.stationarity_residual = {
        let mut worst = 0.0f64;
        for k in 0..memory {
            let mut tgt = base.clone();
            for k2 in 0..memory {
                if k2 != k {
                    tgt -= &filters[k2] * &xstk[k2];
                }
            }
            let yxt = &tgt * xstk[k].transpose();
            let mut terms: Vec<(f64, &DMatrix<f64>)> = Vec::new();
            if w.gamma > 0.0 {
                terms.push((w.gamma, &s));
            }
            let b = la::vec_of(&yxt);
            let rel = (normal_apply(&filters[k], &xxt_k[k], &terms) - &b).norm() / b.norm().max(1e-300);
            worst = worst.max(rel);
        }
        let rw = ReweightState::from_iterate(&s, &s_bar, w.delta1, w.delta2)?;
        let mut terms2: Vec<(f64, &DMatrix<f64>)> = Vec::new();
        if w.gamma > 0.0 {
            for h in &filters {
                terms2.push((w.gamma, h));
            }
        }
        worst.max(graph_violation(&s, &s_bar, w.lambda, w.beta, &terms2, &rw))
    };
    report.wall_seconds = started.elapsed().as_secs_f64();
    let s_gso = Gso::new(s, GsoKind::Adjacency)?;
    Ok(JointRfiSolution { filters, s: s_gso, report })
}

/// Recursive prediction: for each provided input x, the next snapshot is
/// x + sum_k H_k times the k-th most recent (observed or predicted) snapshot.
pub fn ar_predict(
    filters: &[DMatrix<f64>],
    history: &[DMatrix<f64>],
    inputs: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    if filters.is_empty() {
        return Err(RgspError::InvalidParams("need at least one filter".into()));
    }
    let memory = filters.len();
    if history.len() < memory {
        return Err(RgspError::InvalidParams(format!(
            "need at least {memory} history snapshots, got {}",
            history.len()
        )));
    }
    let shape = history[0].shape();
    for m in history.iter().chain(inputs.iter()) {
        if m.shape() != shape {
            return Err(RgspError::DimensionMismatch(format!("{:?} vs {:?}", m.shape(), shape)));
        }
    }
    for h in filters {
        if h.nrows() != shape.0 || h.ncols() != shape.0 {
            return Err(RgspError::DimensionMismatch(format!("filter is {}x{}", h.nrows(), h.ncols())));
        }
    }
    let mut ext: Vec<DMatrix<f64>> = history.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for x in inputs {
        let mut pred = x.clone();
        for (k, h) in filters.iter().enumerate() {
            pred += h * &ext[ext.len() - 1 - k];
        }
        ext.push(pred.clone());
        out.push(pred);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Diagnostics and extraction.
// ---------------------------------------------------------------------------

/// Uniqueness of the filter given (S, X): requires distinct eigenvalues of S
/// and every frequency excited by at least one input column.
pub fn check_identifiability(s: &Gso, x: &DMatrix<f64>) -> Result<IdentifiabilityReport> {
    let n = s.n();
    if x.nrows() != n || x.ncols() == 0 {
        return Err(RgspError::DimensionMismatch(format!("X is {}x{}, operator has {n} nodes", x.nrows(), x.ncols())));
    }
    let sp = s.spectrum()?;
    let mut gap = f64::INFINITY;
    for i in 0..n {
        for j in i + 1..n {
            gap = gap.min((sp.lam_c[i] - sp.lam_c[j]).norm());
        }
    }
    let xc = x.map(|v| Complex64::new(v, 0.0));
    let xt = &sp.vinv_c * xc;
    let mut excite = f64::INFINITY;
    for i in 0..n {
        let mut best = 0.0f64;
        for j in 0..x.ncols() {
            best = best.max(xt[(i, j)].norm());
        }
        excite = excite.min(best);
    }
    Ok(IdentifiabilityReport { min_eigengap: gap, min_excitation: excite, identifiable: gap > 1e-9 && excite > 1e-9 })
}

/// Regress H onto the powers I, S, ..., S^{r-1} in the least-squares sense.
pub fn extract_coeffs(h: &DMatrix<f64>, s: &Gso, r: usize) -> Result<CoeffFit> {
    let n = s.n();
    if h.nrows() != n || h.ncols() != n {
        return Err(RgspError::DimensionMismatch(format!("H is {}x{}, operator has {n} nodes", h.nrows(), h.ncols())));
    }
    if r == 0 || r > n {
        return Err(RgspError::InvalidParams(format!("order r = {r} must be in 1..={n}")));
    }
    let nsq = n * n;
    let mut basis = DMatrix::<f64>::zeros(nsq, r);
    let mut power = DMatrix::<f64>::identity(n, n);
    for k in 0..r {
        if k > 0 {
            power = s.matrix() * power;
        }
        basis.column_mut(k).copy_from(&la::vec_of(&power));
    }
    if basis.iter().any(|v| !v.is_finite()) {
        return Err(RgspError::InvalidParams(format!("powers of the operator overflow at order {r}")));
    }
    let hvec = DMatrix::from_column_slice(nsq, 1, la::vec_of(h).as_slice());
    let sol = la::lstsq(&basis, &hvec);
    let coeffs = DVector::from_column_slice(sol.as_slice());
    let residual = (&hvec - &basis * &sol).norm();
    let basis_cond = la::cond(&basis);
    let ill_conditioned = !basis_cond.is_finite() || basis_cond > 1e12;
    Ok(CoeffFit { h: coeffs, residual, basis_cond, ill_conditioned })
}

/// Write per-iteration diagnostics as CSV; with ground truth available the
/// filter and operator error columns are filled in.
pub fn write_solver_report_csv(
    report: &SolverReport,
    truth: Option<(&[DMatrix<f64>], &DMatrix<f64>)>,
    path: &Path,
) -> Result<()> {
    let mut out = String::from("iter,objective,nerr_H,nerr_S,seconds\n");
    for t in 0..report.objective.len() {
        let (nh, ns) = match truth {
            Some((hs, st)) => {
                if report.h_trace[t].len() != hs.len() {
                    return Err(RgspError::DimensionMismatch(format!(
                        "{} true filters vs {} estimated",
                        hs.len(),
                        report.h_trace[t].len()
                    )));
                }
                let mut acc = 0.0;
                for (k, h_true) in hs.iter().enumerate() {
                    acc += nerr(&report.h_trace[t][k], h_true)?;
                }
                let mh = acc / hs.len() as f64;
                (format!("{:.12e}", mh), format!("{:.12e}", nerr(&report.s_trace[t], st)?))
            }
            None => (String::new(), String::new()),
        };
        out.push_str(&format!(
            "{},{:.12e},{},{},{:.6}\n",
            t + 1,
            report.objective[t],
            nh,
            ns,
            report.seconds[t]
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
