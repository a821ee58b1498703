//! Aggregation sampling: observing a single node while the signal diffuses,
//! and recovering sparse seed vectors from those local samples.

use crate::error::{Result, RgspError};
use crate::filter::GraphFilter;
use crate::graph::Gso;
use crate::la;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Sequential aggregation of a signal at one node.
#[derive(Debug, Clone)]
pub struct AggregationState {
    /// Columns x, Sx, ..., S^{N-1} x.
    pub z: DMatrix<f64>,
    pub node: usize,
    /// Observed shift indices (rows of the selection matrix).
    pub samples: Vec<usize>,
    /// Selected entries of row `node` of Z.
    pub z_qi: DVector<f64>,
}

/// Build the aggregation matrix by repeated shifts and sample node `node` at
/// the given shift indices.
pub fn build_aggregation(gso: &Gso, x: &DVector<f64>, node: usize, samples: &[usize]) -> Result<AggregationState> {
    let n = gso.n();
    check_node(n, node)?;
    validate_samples(n, samples)?;
    let z = gso.diffuse(x, n)?;
    let z_qi = DVector::from_iterator(samples.len(), samples.iter().map(|&r| z[(node, r)]));
    Ok(AggregationState { z, node, samples: samples.to_vec(), z_qi })
}

/// Structural kind of an observation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObsKind {
    /// Aggregation of the seed itself.
    Theta,
    /// Aggregation of the filtered seed.
    Xi,
    /// Lifted bilinear operator acting on vec(s h^T).
    PhiLifted,
    /// Per-node Xi blocks stacked over several observation nodes.
    ThetaBarSpaceShift,
}

/// Maps seed vectors to (sampled) aggregation observations.
#[derive(Debug, Clone)]
pub struct ObservationMatrix {
    pub kind: ObsKind,
    pub matrix: DMatrix<f64>,
    /// Observation node(s).
    pub nodes: Vec<usize>,
    /// Diffusing filter coefficients when one is involved.
    pub filter: Option<Vec<f64>>,
    /// 2-norm condition number; high-order shift columns degrade quickly.
    pub cond: f64,
    /// Set when cond exceeds 1e12.
    pub cond_warning: bool,
}

impl ObservationMatrix {
    fn wrap(kind: ObsKind, matrix: DMatrix<f64>, nodes: Vec<usize>, filter: Option<Vec<f64>>) -> ObservationMatrix {
        let cond = la::cond(&matrix);
        ObservationMatrix { kind, matrix, nodes, filter, cond, cond_warning: cond.is_nan() || cond > 1e12 }
    }
}

/// Theta_i = Psi^T diag(v_i) V^{-1}, so that aggregating x = s at node i reads
/// row i of Z.
pub fn observation_theta(gso: &Gso, node: usize) -> Result<ObservationMatrix> {
    check_node(gso.n(), node)?;
    let m = freq_weighted_map(gso, node, None)?;
    Ok(ObservationMatrix::wrap(ObsKind::Theta, m, vec![node], None))
}

/// Xi_i = Psi^T diag(v_i . h_tilde) V^{-1}: aggregation of the diffused seed x = Hs.
pub fn observation_xi(gso: &Gso, node: usize, filter: &GraphFilter) -> Result<ObservationMatrix> {
    check_node(gso.n(), node)?;
    let m = freq_weighted_map(gso, node, Some(filter))?;
    Ok(ObservationMatrix::wrap(ObsKind::Xi, m, vec![node], Some(filter.coeffs().as_slice().to_vec())))
}

/// Lifted operator Phi_i (N x N*R) with z_i = Phi_i vec(s h^T) for a filter of
/// order R; column r*N + j carries V^{-1} column scaling lambda_k^r.
pub fn observation_phi(gso: &Gso, node: usize, order: usize) -> Result<ObservationMatrix> {
    let n = gso.n();
    check_node(n, node)?;
    if order == 0 {
        return Err(RgspError::InvalidParams("filter order must be at least 1".into()));
    }
    let sp = gso.spectrum()?;
    let m = if let Some(re) = &sp.real {
        let base = la::vandermonde(&re.lam, n).transpose() * DMatrix::from_diagonal(&re.v.row(node).transpose());
        let psi_f = la::vandermonde(&re.lam, order);
        let mut row_kr = DMatrix::<f64>::zeros(n, n * order);
        for k in 0..n {
            for r in 0..order {
                for j in 0..n {
                    row_kr[(k, r * n + j)] = psi_f[(k, r)] * re.vinv[(k, j)];
                }
            }
        }
        base * row_kr
    } else {
        let vi = DVector::from_iterator(n, (0..n).map(|k| sp.v_c[(node, k)]));
        let base = la::vandermonde_c(&sp.lam_c, n).transpose() * DMatrix::from_diagonal(&vi);
        let psi_f = la::vandermonde_c(&sp.lam_c, order);
        let mut row_kr = DMatrix::<Complex64>::zeros(n, n * order);
        for k in 0..n {
            for r in 0..order {
                for j in 0..n {
                    row_kr[(k, r * n + j)] = psi_f[(k, r)] * sp.vinv_c[(k, j)];
                }
            }
        }
        realify(base * row_kr, "lifted observation")?
    };
    Ok(ObservationMatrix::wrap(ObsKind::PhiLifted, m, vec![node], None))
}

/// Stack per-node observation blocks for space-shift sampling. Returns the
/// stacked operator and the global row indices selected by `per_node_indices`.
pub fn space_shift_assemble(
    gso: &Gso,
    filter: &GraphFilter,
    nodes: &[usize],
    per_node_indices: &[Vec<usize>],
) -> Result<(ObservationMatrix, Vec<usize>)> {
    let n = gso.n();
    if nodes.is_empty() {
        return Err(RgspError::InvalidParams("need at least one observation node".into()));
    }
    if per_node_indices.len() != nodes.len() {
        return Err(RgspError::DimensionMismatch(format!(
            "{} nodes but {} index lists",
            nodes.len(),
            per_node_indices.len()
        )));
    }
    let mut stacked = DMatrix::<f64>::zeros(nodes.len() * n, n);
    let mut samples = Vec::new();
    for (b, (&node, idxs)) in nodes.iter().zip(per_node_indices).enumerate() {
        let xi = observation_xi(gso, node, filter)?;
        stacked.rows_mut(b * n, n).copy_from(&xi.matrix);
        validate_samples(n, idxs)?;
        samples.extend(idxs.iter().map(|&r| b * n + r));
    }
    let obs = ObservationMatrix::wrap(
        ObsKind::ThetaBarSpaceShift,
        stacked,
        nodes.to_vec(),
        Some(filter.coeffs().as_slice().to_vec()),
    );
    Ok((obs, samples))
}

fn freq_weighted_map(gso: &Gso, node: usize, filter: Option<&GraphFilter>) -> Result<DMatrix<f64>> {
    let n = gso.n();
    let sp = gso.spectrum()?;
    if let Some(re) = &sp.real {
        let mut w = re.v.row(node).transpose();
        if let Some(f) = filter {
            let ht = la::vandermonde(&re.lam, f.order()) * f.coeffs();
            w.component_mul_assign(&ht);
        }
        Ok(la::vandermonde(&re.lam, n).transpose() * DMatrix::from_diagonal(&w) * &re.vinv)
    } else {
        let mut w = DVector::from_iterator(n, (0..n).map(|k| sp.v_c[(node, k)]));
        if let Some(f) = filter {
            let hc = f.coeffs().map(|x| Complex64::new(x, 0.0));
            let ht = la::vandermonde_c(&sp.lam_c, f.order()) * hc;
            w.component_mul_assign(&ht);
        }
        let m = la::vandermonde_c(&sp.lam_c, n).transpose() * DMatrix::from_diagonal(&w) * &sp.vinv_c;
        realify(m, "observation matrix")
    }
}

/// Observation matrices of real operators are real; enforce that numerically.
fn realify(m: DMatrix<Complex64>, context: &str) -> Result<DMatrix<f64>> {
    let scale = m.iter().map(|z| z.re.abs()).fold(1.0_f64, f64::max);
    let resid = m.iter().map(|z| z.im.abs()).fold(0.0_f64, f64::max);
    if resid > 1e-6 * scale {
        return Err(RgspError::NonDiagonalizable(format!("{context}: imaginary residue {resid:.3e}")));
    }
    Ok(m.map(|z| z.re))
}

/// Noise covariance of the aggregated observations.
#[derive(Debug, Clone, PartialEq)]
pub enum NoiseCov {
    /// Noiseless; whitening is the identity.
    Identity,
    /// sigma^2 I with the given variance.
    White(f64),
    /// Full covariance over all observation rows.
    Full(DMatrix<f64>),
}

impl NoiseCov {
    /// (R_{w,Q})^{-1/2} for the selected rows.
    pub fn whitener(&self, samples: &[usize]) -> Result<DMatrix<f64>> {
        let q = samples.len();
        match self {
            NoiseCov::Identity => Ok(DMatrix::identity(q, q)),
            NoiseCov::White(var) => {
                if *var <= 0.0 {
                    return Err(RgspError::SingularNoiseCov);
                }
                Ok(DMatrix::identity(q, q) / var.sqrt())
            }
            NoiseCov::Full(r) => {
                let max = samples.iter().copied().max().unwrap_or(0);
                if r.nrows() != r.ncols() || r.nrows() <= max {
                    return Err(RgspError::DimensionMismatch(format!(
                        "noise covariance is {}x{}, need rows past index {max}",
                        r.nrows(),
                        r.ncols()
                    )));
                }
                let sub = DMatrix::from_fn(q, q, |a, b| r[(samples[a], samples[b])]);
                let (lam, v) = la::sym_eigen_desc(&sub);
                let lmax = lam[0].max(0.0);
                if lam.iter().any(|&l| l <= 1e-12 * lmax.max(1e-300)) {
                    return Err(RgspError::SingularNoiseCov);
                }
                let d = DMatrix::from_diagonal(&lam.map(|l| 1.0 / l.sqrt()));
                Ok(&v * d * v.transpose())
            }
        }
    }
}

/// Recovered seed vector with solver diagnostics.
#[derive(Debug, Clone)]
pub struct SeedEstimate {
    /// Full-length estimate; exactly zero outside `support`.
    pub s_hat: DVector<f64>,
    pub support: Vec<usize>,
    /// Filter estimate from blind deconvolution.
    pub h_hat: Option<DVector<f64>>,
    /// Set when the estimate is only defined up to scale.
    pub scaling_note: bool,
    /// Set when the observation submatrix lost column rank (minimum-norm fit).
    pub rank_deficient: bool,
    /// Blind deconvolution: rank-1 extraction was ambiguous (sigma1/sigma2 < 3).
    pub degenerate: bool,
    /// Blind deconvolution: fewer samples than the R + S unknown count.
    pub underdetermined: bool,
    pub iterations: usize,
}

impl SeedEstimate {
    fn new(s_hat: DVector<f64>, support: Vec<usize>) -> SeedEstimate {
        SeedEstimate {
            s_hat,
            support,
            h_hat: None,
            scaling_note: false,
            rank_deficient: false,
            degenerate: false,
            underdetermined: false,
            iterations: 0,
        }
    }
}

/// Threshold below which a recovered entry does not count as support.
pub fn support_threshold(s: &DVector<f64>) -> f64 {
    1e-3 * s.amax()
}

fn thresholded(mut s: DVector<f64>) -> (DVector<f64>, Vec<usize>) {
    let thr = support_threshold(&s);
    let mut support = Vec::new();
    for i in 0..s.len() {
        if s[i].abs() > thr {
            support.push(i);
        } else {
            s[i] = 0.0;
        }
    }
    (s, support)
}

/// Best linear unbiased estimate of the seed entries on a known support.
pub fn recover_known_support(
    obs: &ObservationMatrix,
    z_q: &DVector<f64>,
    samples: &[usize],
    support: &[usize],
    noise: &NoiseCov,
) -> Result<SeedEstimate> {
    let (rows, cols) = obs.matrix.shape();
    validate_samples(rows, samples)?;
    validate_support(cols, support)?;
    if z_q.len() != samples.len() {
        return Err(RgspError::DimensionMismatch(format!("{} observations vs {} samples", z_q.len(), samples.len())));
    }
    if samples.len() < support.len() {
        return Err(RgspError::InvalidParams(format!(
            "{} samples cannot determine {} seed entries",
            samples.len(),
            support.len()
        )));
    }
    let w = noise.whitener(samples)?;
    let m_q = &w * submatrix(&obs.matrix, samples, support);
    let (pinv, rank) = la::pinv_with_rank(&m_q);
    let s_s = pinv * (w * z_q);
    let mut s_hat = DVector::zeros(cols);
    for (t, &j) in support.iter().enumerate() {
        s_hat[j] = s_s[t];
    }
    let mut est = SeedEstimate::new(s_hat, support.to_vec());
    est.rank_deficient = rank < support.len();
    Ok(est)
}

/// Error covariance R_e = (M_Q^T M_Q)^dagger of the known-support estimator.
pub fn error_covariance(
    obs: &ObservationMatrix,
    support: &[usize],
    samples: &[usize],
    noise: &NoiseCov,
) -> Result<DMatrix<f64>> {
    let (rows, cols) = obs.matrix.shape();
    validate_samples(rows, samples)?;
    validate_support(cols, support)?;
    let w = noise.whitener(samples)?;
    let m_q = w * submatrix(&obs.matrix, samples, support);
    let gram = m_q.transpose() * &m_q;
    let re = la::pinv(&gram);
    Ok(0.5 * (&re + re.transpose()))
}

/// Sampling-design criteria evaluated on R_e.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignCriterion {
    /// trace(R_e).
    Mse,
    /// Largest eigenvalue of R_e.
    SpectralNorm,
    /// log det(R_e) over its positive spectrum.
    LogDet,
}

/// Greedily pick Q observation rows minimizing the criterion; ties break to
/// the lowest row index. Rank feasibility dominates the criterion until the
/// selection supports the whole seed subspace.
pub fn greedy_sampling_design(
    obs: &ObservationMatrix,
    support: &[usize],
    noise: &NoiseCov,
    q: usize,
    criterion: DesignCriterion,
) -> Result<Vec<usize>> {
    let (rows, cols) = obs.matrix.shape();
    validate_support(cols, support)?;
    if q < support.len() || q > rows {
        return Err(RgspError::InvalidParams(format!(
            "need |support| = {} <= Q = {q} <= {rows}",
            support.len()
        )));
    }
    let mut chosen: Vec<usize> = Vec::with_capacity(q);
    for _ in 0..q {
        let mut best: Option<(usize, usize, f64)> = None; // (deficiency, row, score)
        for cand in 0..rows {
            if chosen.contains(&cand) {
                continue;
            }
            let mut trial = chosen.clone();
            trial.push(cand);
            let w = noise.whitener(&trial)?;
            let m = w * submatrix(&obs.matrix, &trial, support);
            let (deficiency, score) = design_score(&m, support.len(), criterion);
            let better = match best {
                None => true,
                Some((bd, _, bs)) => deficiency < bd || (deficiency == bd && score < bs - 1e-12 * score.abs().max(1.0)),
            };
            if better {
                best = Some((deficiency, cand, score));
            }
        }
        chosen.push(best.expect("at least one candidate").1);
    }
    let w = noise.whitener(&chosen)?;
    let m = w * submatrix(&obs.matrix, &chosen, support);
    if la::rank(&m) < support.len() {
        return Err(RgspError::InfeasibleStart(format!(
            "no rank-{} selection found among {} rows",
            support.len(),
            rows
        )));
    }
    Ok(chosen)
}

fn design_score(m: &DMatrix<f64>, s: usize, criterion: DesignCriterion) -> (usize, f64) {
    let gram = m.transpose() * m;
    let (lam, _) = la::sym_eigen_desc(&gram);
    let tol = la::pinv_tol(gram.nrows(), gram.ncols(), lam[0].max(0.0).sqrt()).powi(2);
    let pos: Vec<f64> = lam.iter().copied().filter(|&l| l > tol.max(1e-300)).collect();
    let deficiency = s - pos.len();
    let score = match criterion {
        DesignCriterion::Mse => pos.iter().map(|l| 1.0 / l).sum(),
        DesignCriterion::SpectralNorm => pos.last().map_or(f64::INFINITY, |l| 1.0 / l),
        DesignCriterion::LogDet => pos.iter().map(|l| -l.ln()).sum(),
    };
    (deficiency, score)
}

/// Critical l1 weight of the whitened problem scaled by `fraction`: at
/// fraction 1 the recovery is identically zero, useful fractions sit around
/// 0.01..0.1.
pub fn suggest_l1_weight(
    obs: &ObservationMatrix,
    y_q: &DVector<f64>,
    samples: &[usize],
    noise: &NoiseCov,
    fraction: f64,
) -> Result<f64> {
    validate_samples(obs.matrix.nrows(), samples)?;
    let w = noise.whitener(samples)?;
    let a = w.clone() * all_col_submatrix(&obs.matrix, samples);
    let b = w * y_q;
    Ok(fraction * (2.0 * (a.transpose() * b)).amax())
}

/// l1-regularized sparse recovery min_s ||W(y - Pi Theta s)||^2 + gamma ||s||_1
/// by accelerated proximal gradient with backtracking.
pub fn blind_sparse_recovery(
    obs: &ObservationMatrix,
    y_q: &DVector<f64>,
    samples: &[usize],
    noise: &NoiseCov,
    gamma: f64,
) -> Result<SeedEstimate> {
    let rows = obs.matrix.nrows();
    validate_samples(rows, samples)?;
    if y_q.len() != samples.len() {
        return Err(RgspError::DimensionMismatch(format!("{} observations vs {} samples", y_q.len(), samples.len())));
    }
    if gamma <= 0.0 {
        return Err(RgspError::InvalidParams(format!("gamma = {gamma} must be positive")));
    }
    let w = noise.whitener(samples)?;
    let a = w.clone() * all_col_submatrix(&obs.matrix, samples);
    let b = w * y_q;
    let (s, iterations) = fista_lasso(&a, &b, gamma, 5000, 1e-8)?;
    let (s_hat, support) = thresholded(s);
    let mut est = SeedEstimate::new(s_hat, support);
    est.iterations = iterations;
    Ok(est)
}

/// Equality-constrained variant: min ||s||_1 subject to Pi Theta s = y.
pub fn blind_sparse_recovery_exact(obs: &ObservationMatrix, y_q: &DVector<f64>, samples: &[usize]) -> Result<SeedEstimate> {
    let rows = obs.matrix.nrows();
    validate_samples(rows, samples)?;
    if y_q.len() != samples.len() {
        return Err(RgspError::DimensionMismatch(format!("{} observations vs {} samples", y_q.len(), samples.len())));
    }
    let a = all_col_submatrix(&obs.matrix, samples);
    let (s, iterations) = admm_basis_pursuit(&a, y_q, 20000, 1e-10)?;
    let (s_hat, support) = thresholded(s);
    let mut est = SeedEstimate::new(s_hat, support);
    est.iterations = iterations;
    Ok(est)
}

/// Joint seed/filter recovery through the lifted variable Sigma = s h^T with
/// nuclear-norm and row-l21 surrogates; returns the rank-1 factors.
pub fn blind_deconvolution(
    obs_phi: &ObservationMatrix,
    z_q: &DVector<f64>,
    samples: &[usize],
    gamma1: f64,
    gamma2: f64,
    init: Option<&DMatrix<f64>>,
) -> Result<SeedEstimate> {
    if obs_phi.kind != ObsKind::PhiLifted {
        return Err(RgspError::InvalidParams("blind deconvolution needs the lifted observation".into()));
    }
    let rows = obs_phi.matrix.nrows();
    let nr = obs_phi.matrix.ncols();
    let n = rows; // lifted operator is N x N*R
    let r = nr / n;
    validate_samples(rows, samples)?;
    if z_q.len() != samples.len() {
        return Err(RgspError::DimensionMismatch(format!("{} observations vs {} samples", z_q.len(), samples.len())));
    }
    if gamma1 < 0.0 || gamma2 < 0.0 {
        return Err(RgspError::InvalidParams("penalty weights must be nonnegative".into()));
    }
    let a = all_col_submatrix(&obs_phi.matrix, samples);
    let sigma0 = init.cloned().unwrap_or_else(|| DMatrix::zeros(n, r));
    if init.is_some_and(|m| m.shape() != (n, r)) {
        return Err(RgspError::DimensionMismatch(format!("init must be {n}x{r}")));
    }
    let (sigma, iterations) = prox_grad_lifted(&a, z_q, n, r, gamma1, gamma2, &sigma0, 5000, 1e-8)?;
    // rank-1 extraction
    let svd = sigma.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let s1 = svd.singular_values[0];
    let s2 = if svd.singular_values.len() > 1 { svd.singular_values[1] } else { 0.0 };
    let degenerate = s1 <= 0.0 || (s2 > 0.0 && s1 / s2 < 3.0);
    let mut h = DVector::from_iterator(r, (0..r).map(|j| vt[(0, j)]));
    let mut s = DVector::from_iterator(n, (0..n).map(|i| u[(i, 0)] * s1));
    if let Some(first) = h.iter().find(|v| v.abs() > 1e-12) {
        if *first < 0.0 {
            h = -h;
            s = -s;
        }
    }
    let (s_hat, support) = thresholded(s);
    let underdetermined = samples.len() < r + support.len();
    Ok(SeedEstimate {
        s_hat,
        support,
        h_hat: Some(h),
        scaling_note: true,
        rank_deficient: false,
        degenerate,
        underdetermined,
        iterations,
    })
}

/// Interpolate a bandlimited signal from vertex samples: x = V_K pinv(Pi V_K) x_Q.
pub fn selection_sampling_recover(gso: &Gso, x_q: &DVector<f64>, samples: &[usize], k: usize) -> Result<DVector<f64>> {
    validate_samples(gso.n(), samples)?;
    if x_q.len() != samples.len() {
        return Err(RgspError::DimensionMismatch(format!("{} values vs {} samples", x_q.len(), samples.len())));
    }
    let vk = gso.v_k(k)?;
    let sub = all_col_submatrix(&vk, samples);
    let (pinv, rank) = la::pinv_with_rank(&sub);
    if rank < k {
        return Err(RgspError::RankDeficient(format!("selection submatrix has rank {rank} < K = {k}")));
    }
    Ok(vk * (pinv * x_q))
}

/// Interpolate a bandlimited signal from aggregation samples at one node.
pub fn aggregation_bandlimited_recover(
    gso: &Gso,
    z_q: &DVector<f64>,
    node: usize,
    samples: &[usize],
    k: usize,
) -> Result<DVector<f64>> {
    let n = gso.n();
    check_node(n, node)?;
    validate_samples(n, samples)?;
    if z_q.len() != samples.len() {
        return Err(RgspError::DimensionMismatch(format!("{} values vs {} samples", z_q.len(), samples.len())));
    }
    let sp = gso.real_spectrum()?;
    if k == 0 || k > n {
        return Err(RgspError::InvalidParams(format!("bandwidth {k} outside 1..={n}")));
    }
    for freq in 0..k {
        if sp.v[(node, freq)].abs() < 1e-12 {
            return Err(RgspError::FrequencyBlind(freq));
        }
    }
    // observation restricted to the K active frequencies
    let psi_t = la::vandermonde(&sp.lam, n).transpose();
    let mut basis = DMatrix::<f64>::zeros(samples.len(), k);
    for (row, &shift) in samples.iter().enumerate() {
        for freq in 0..k {
            basis[(row, freq)] = psi_t[(shift, freq)] * sp.v[(node, freq)];
        }
    }
    let (pinv, rank) = la::pinv_with_rank(&basis);
    if rank < k {
        return Err(RgspError::RankDeficient(format!("aggregation submatrix has rank {rank} < K = {k}")));
    }
    Ok(gso.v_k(k)? * (pinv * z_q))
}

/// Fraction of trials satisfying the predicate.
pub fn recovery_rate<T>(trials: &[T], success: impl Fn(&T) -> bool) -> f64 {
    if trials.is_empty() {
        return 0.0;
    }
    trials.iter().filter(|t| success(t)).count() as f64 / trials.len() as f64
}

/// Success rule for seed recovery: exact support match and l2 error below 0.1.
pub fn seed_success(est: &SeedEstimate, s_true: &DVector<f64>) -> bool {
    let true_support: Vec<usize> = (0..s_true.len()).filter(|&i| s_true[i] != 0.0).collect();
    est.support == true_support && (&est.s_hat - s_true).norm() < 0.1
}

fn check_node(n: usize, node: usize) -> Result<()> {
    if node >= n {
        return Err(RgspError::InvalidParams(format!("node {node} outside 0..{n}")));
    }
    Ok(())
}

fn validate_samples(limit: usize, samples: &[usize]) -> Result<()> {
    if samples.is_empty() {
        return Err(RgspError::InvalidParams("need at least one sample index".into()));
    }
    let mut seen = vec![false; limit];
    for &s in samples {
        if s >= limit {
            return Err(RgspError::InvalidParams(format!("sample index {s} outside 0..{limit}")));
        }
        if seen[s] {
            return Err(RgspError::InvalidParams(format!("duplicate sample index {s}")));
        }
        seen[s] = true;
    }
    Ok(())
}

fn validate_support(n: usize, support: &[usize]) -> Result<()> {
    if support.is_empty() {
        return Err(RgspError::InvalidParams("support must be nonempty".into()));
    }
    let mut seen = vec![false; n];
    for &j in support {
        if j >= n {
            return Err(RgspError::InvalidParams(format!("support index {j} outside 0..{n}")));
        }
        if seen[j] {
            return Err(RgspError::InvalidParams(format!("duplicate support index {j}")));
        }
        seen[j] = true;
    }
    Ok(())
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |a, b| m[(rows[a], cols[b])])
}

fn all_col_submatrix(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), m.ncols(), |a, b| m[(rows[a], b)])
}

fn fista_lasso(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    gamma: f64,
    max_iter: usize,
    tol: f64,
) -> Result<(DVector<f64>, usize)> {
    // pathwise continuation: strong shrinkage finds the sparsity pattern fast,
    // then the target weight polishes on the identified face
    let gamma_max = (2.0 * (a.transpose() * b)).amax();
    let mut stages = vec![gamma];
    let mut g = gamma;
    while g < 0.12 * gamma_max {
        g *= 8.0;
        stages.push(g.min(0.12 * gamma_max.max(gamma)));
    }
    stages.reverse();
    let mut s = DVector::<f64>::zeros(a.ncols());
    let mut spent = 0usize;
    for (k, &stage_gamma) in stages.iter().enumerate() {
        let budget = if k + 1 == stages.len() { max_iter - spent } else { (max_iter / (2 * stages.len())).max(50) };
        let (next, used, converged) = fista_stage(a, b, stage_gamma, s, budget, tol);
        if std::env::var_os("RGSP_L1_TRACE").is_some() {
            eprintln!("stage {k}: gamma={stage_gamma:.3e} used={used} converged={converged}");
        }
        s = next;
        spent += used;
        if k + 1 == stages.len() {
            if !converged {
                return Err(RgspError::NonConvergence(format!("l1 solver hit {max_iter} iterations")));
            }
            return Ok((s, spent));
        }
        if spent >= max_iter {
            return Err(RgspError::NonConvergence(format!("l1 solver hit {max_iter} iterations")));
        }
    }
    unreachable!("last stage returns")
}

fn fista_stage(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    gamma: f64,
    start: DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> (DVector<f64>, usize, bool) {
    let n = a.ncols();
    let data = |s: &DVector<f64>| (a * s - b).norm_squared();
    let objective = |s: &DVector<f64>| data(s) + gamma * s.iter().map(|v| v.abs()).sum::<f64>();
    let mut s = start;
    let mut y = s.clone();
    let mut t = 1.0_f64;
    let mut lip = (2.0 * la::spectral_norm(a).powi(2)).max(1e-12);
    let mut prev = objective(&s);
    for it in 1..=max_iter {
        let resid = a * &y - b;
        let fy = resid.norm_squared();
        let grad = 2.0 * (a.transpose() * resid);
        let next = loop {
            let cand = DVector::from_fn(n, |i, _| la::soft(y[i] - grad[i] / lip, gamma / lip));
            let step = &cand - &y;
            let bound = fy + grad.dot(&step) + 0.5 * lip * step.norm_squared();
            if data(&cand) <= bound + 1e-12 * bound.abs().max(1.0) {
                break cand;
            }
            lip *= 2.0;
            if !lip.is_finite() {
                return (y, it, false);
            }
        };
        let cur = objective(&next);
        if cur > prev && t > 1.0 {
            // momentum overshot; restart acceleration from the last iterate
            t = 1.0;
            y = s.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + ((t - 1.0) / t_next) * (&next - &s);
        let step_rel = (&next - &s).norm() / next.norm().max(1.0);
        s = next;
        t = t_next;
        if (prev - cur).abs() <= tol * prev.abs().max(1e-12) || step_rel <= tol {
            return (s, it, true);
        }
        prev = cur;
    }
    (s, max_iter, false)
}

fn admm_basis_pursuit(a: &DMatrix<f64>, b: &DVector<f64>, max_iter: usize, tol: f64) -> Result<(DVector<f64>, usize)> {
    let n = a.ncols();
    let pinv = la::pinv(a);
    let mut rho = 1.0_f64;
    let mut z = &pinv * b;
    let mut u = DVector::<f64>::zeros(n);
    let scale = b.norm().max(1.0);
    for it in 1..=max_iter {
        let v = &z - &u;
        let x = &v - &pinv * (a * &v - b);
        let z_new = (&x + &u).map(|t| la::soft(t, 1.0 / rho));
        let primal = (&x - &z_new).norm();
        let dual = rho * (&z_new - &z).norm();
        u += &x - &z_new;
        z = z_new;
        if primal < tol * scale && dual < tol * scale * rho.max(1.0) {
            // final exact-feasibility polish
            let v = &z - &u;
            let x = &v - &pinv * (a * &v - b);
            return Ok((x, it));
        }
        if it % 50 == 0 {
            if primal > 10.0 * dual {
                rho *= 2.0;
                u /= 2.0;
            } else if dual > 10.0 * primal {
                rho /= 2.0;
                u *= 2.0;
            }
        }
    }
    Err(RgspError::NonConvergence(format!("basis pursuit hit {max_iter} iterations")))
}

/// Proximal gradient on the lifted objective, alternating the nuclear and
/// row-sparsity proxes after each gradient step.
#[allow(clippy::too_many_arguments)]
fn prox_grad_lifted(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    n: usize,
    r: usize,
    gamma1: f64,
    gamma2: f64,
    init: &DMatrix<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<(DMatrix<f64>, usize)> {
    let data = |x: &DMatrix<f64>| (a * la::vec_of(x) - b).norm_squared();
    let objective = |x: &DMatrix<f64>| {
        let svd = x.clone().svd(false, false);
        let nuc: f64 = svd.singular_values.iter().sum();
        let rows: f64 = (0..x.nrows()).map(|i| x.row(i).norm()).sum();
        data(x) + gamma1 * nuc + gamma2 * rows
    };
    let mut lip = (2.0 * la::spectral_norm(a).powi(2)).max(1e-12);
    let mut x = init.clone();
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut prev = objective(&x);
    for it in 1..=max_iter {
        let resid = a * la::vec_of(&y) - b;
        let fy = resid.norm_squared();
        let grad = la::unvec(&(2.0 * (a.transpose() * resid)), n, r);
        let next = loop {
            let point = &y - &grad / lip;
            let cand = row_shrink(&svt(&point, gamma1 / lip), gamma2 / lip);
            let step = &cand - &y;
            let bound = fy + frob_dot(&grad, &step) + 0.5 * lip * step.norm_squared();
            if data(&cand) <= bound + 1e-12 * bound.abs().max(1.0) {
                break cand;
            }
            lip *= 2.0;
            if !lip.is_finite() {
                return Err(RgspError::NonConvergence("line search overflow".into()));
            }
        };
        let cur = objective(&next);
        if cur > prev && t > 1.0 {
            t = 1.0;
            y = x.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &next + ((t - 1.0) / t_next) * (&next - &x);
        let step_rel = (&next - &x).norm() / next.norm().max(1.0);
        x = next;
        t = t_next;
        if (prev - cur).abs() <= tol * prev.abs().max(1e-12) || step_rel <= tol {
            return Ok((x, it));
        }
        prev = cur;
    }
    Err(RgspError::NonConvergence(format!("lifted solver hit {max_iter} iterations")))
}

fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn svt(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    if tau == 0.0 {
        return m.clone();
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, &sv) in svd.singular_values.iter().enumerate() {
        let shrunk = (sv - tau).max(0.0);
        if shrunk > 0.0 {
            let uk = u.column(k);
            let vk = vt.row(k);
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    out[(i, j)] += shrunk * uk[i] * vk[j];
                }
            }
        }
    }
    out
}

fn row_shrink(m: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        let norm = m.row(i).norm();
        let factor = if norm > tau { (norm - tau) / norm } else { 0.0 };
        for j in 0..m.ncols() {
            out[(i, j)] *= factor;
        }
    }
    out
}
