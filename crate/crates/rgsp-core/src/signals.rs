//! Graph-signal generators, the non-robust denoising baselines, and error
//! metrics.

use crate::error::{Result, RgspError};
use crate::filter::GraphFilter;
use crate::graph::Gso;
use crate::la;
use crate::lapack;
use crate::rng::seeded_rng;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// A batch of graph signals with optional generation byproducts.
#[derive(Debug, Clone)]
pub struct SignalSet {
    /// N x M signal matrix, one signal per column.
    pub x: DMatrix<f64>,
    /// Clean companion when the generator distinguishes one.
    pub truth: Option<DMatrix<f64>>,
    /// Sparse seed vectors (diffused-sparse model), one column per signal.
    pub seeds: Option<DMatrix<f64>>,
    /// Seed supports, one per signal.
    pub supports: Option<Vec<Vec<usize>>>,
    /// Generation descriptor.
    pub model: String,
}

impl SignalSet {
    pub fn plain(x: DMatrix<f64>, model: &str) -> SignalSet {
        SignalSet { x, truth: None, seeds: None, supports: None, model: model.into() }
    }
}

/// Signal generation models.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalModel {
    /// Random combination of the K leading eigenvectors.
    Bandlimited { k: usize },
    /// Diffusion x = Hs of a sparse seed vector, at most `sparsity` nonzeros.
    Dsgs { sparsity: usize, coeffs: Vec<f64> },
    /// Low-pass filtered white noise: x solves (I + alpha L) x = w.
    Smooth { alpha: f64 },
    /// Stationary signal x = Hw with white w, so C_x = H H^T.
    StationaryWhite { coeffs: Vec<f64> },
    /// Median over closed neighbourhoods of a diffused white signal.
    DiffusedMedian { coeffs: Vec<f64> },
}

/// Draw M signals from the model; deterministic under a fixed seed.
pub fn generate_signal(gso: &Gso, model: &SignalModel, m: usize, seed: u64) -> Result<SignalSet> {
    if m == 0 {
        return Err(RgspError::InvalidParams("need at least one signal".into()));
    }
    let n = gso.n();
    let mut rng = seeded_rng(seed, &[0x7369_676eu64]);
    match model {
        SignalModel::Bandlimited { k } => {
            let vk = gso.v_k(*k)?;
            if *k == 0 {
                return Err(RgspError::InvalidParams("bandwidth must be at least 1".into()));
            }
            let xt = gauss(*k, m, &mut rng);
            Ok(SignalSet { x: vk * xt, truth: None, seeds: None, supports: None, model: format!("bandlimited(k={k})") })
        }
        SignalModel::Dsgs { sparsity, coeffs } => {
            let (x, seeds, supports) = diffuse_sparse(gso, *sparsity, coeffs, m, &mut rng)?;
            Ok(SignalSet {
                x,
                truth: None,
                seeds: Some(seeds),
                supports: Some(supports),
                model: format!("dsgs(s={sparsity})"),
            })
        }
        SignalModel::Smooth { alpha } => {
            if *alpha < 0.0 {
                return Err(RgspError::InvalidParams(format!("alpha = {alpha} must be nonnegative")));
            }
            let w = gauss(n, m, &mut rng);
            let a = DMatrix::identity(n, n) + *alpha * gso.laplacian()?;
            let x = lapack::solve_spd(a, w)?;
            Ok(SignalSet::plain(x, &format!("smooth(alpha={alpha})")))
        }
        SignalModel::StationaryWhite { coeffs } => {
            let f = GraphFilter::new(gso, coeffs)?;
            let x = f.apply(&gauss(n, m, &mut rng))?;
            Ok(SignalSet::plain(x, "stationary_white"))
        }
        SignalModel::DiffusedMedian { coeffs } => {
            let f = GraphFilter::new(gso, coeffs)?;
            let y = f.apply(&gauss(n, m, &mut rng))?;
            let mut x = DMatrix::zeros(n, m);
            for c in 0..m {
                for i in 0..n {
                    let mut vals = vec![y[(i, c)]];
                    vals.extend(gso.neighbors(i).into_iter().map(|j| y[(j, c)]));
                    x[(i, c)] = la::median(&vals);
                }
            }
            Ok(SignalSet::plain(x, "diffused_median"))
        }
    }
}

/// Sparse seeds plus their diffusion through the filter.
#[allow(clippy::type_complexity)]
pub fn diffuse_sparse(
    gso: &Gso,
    sparsity: usize,
    coeffs: &[f64],
    m: usize,
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Vec<Vec<usize>>)> {
    let n = gso.n();
    if sparsity == 0 || sparsity > n {
        return Err(RgspError::InvalidParams(format!("sparsity {sparsity} outside 1..={n}")));
    }
    let f = GraphFilter::new(gso, coeffs)?;
    let mut seeds = DMatrix::<f64>::zeros(n, m);
    let mut supports = Vec::with_capacity(m);
    let mut nodes: Vec<usize> = (0..n).collect();
    for c in 0..m {
        nodes.shuffle(rng);
        let mut sup: Vec<usize> = nodes[..sparsity].to_vec();
        sup.sort_unstable();
        for &i in &sup {
            seeds[(i, c)] = StandardNormal.sample(rng);
        }
        supports.push(sup);
    }
    let x = f.apply(&seeds)?;
    Ok((x, seeds, supports))
}

fn gauss(n: usize, m: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |_, _| StandardNormal.sample(rng))
}

/// Project onto the span of the K leading eigenvectors.
pub fn denoise_bandlimited(gso: &Gso, x: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    if x.len() != gso.n() {
        return Err(RgspError::DimensionMismatch(format!("signal length {} vs n={}", x.len(), gso.n())));
    }
    let vk = gso.v_k(k)?;
    Ok(&vk * (vk.transpose() * x))
}

/// Regularizer for the quadratic denoiser.
#[derive(Debug, Clone)]
pub enum QuadRegularizer<'a> {
    /// Q = L, the combinatorial Laplacian of the graph.
    LaplacianQuadratic,
    /// Q = H^T H for a (typically high-pass) filter H.
    FilterSmoothness(&'a GraphFilter),
}

/// Solve (I + alpha Q) x0 = x.
pub fn denoise_quadratic(gso: &Gso, x: &DVector<f64>, alpha: f64, reg: &QuadRegularizer) -> Result<DVector<f64>> {
    if x.len() != gso.n() {
        return Err(RgspError::DimensionMismatch(format!("signal length {} vs n={}", x.len(), gso.n())));
    }
    if alpha < 0.0 {
        return Err(RgspError::InvalidParams(format!("alpha = {alpha} must be nonnegative")));
    }
    if alpha == 0.0 {
        return Ok(x.clone());
    }
    let n = gso.n();
    let q = match reg {
        QuadRegularizer::LaplacianQuadratic => gso.laplacian()?,
        QuadRegularizer::FilterSmoothness(f) => f.matrix().transpose() * f.matrix(),
    };
    let a = DMatrix::identity(n, n) + alpha * q;
    let sol = lapack::solve_spd(a, DMatrix::from_column_slice(n, 1, x.as_slice()))?;
    Ok(DVector::from_column_slice(sol.as_slice()))
}

/// Normalized estimation error ||est - truth||_F^2 / ||truth||_F^2.
pub fn nerr(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if estimate.shape() != truth.shape() {
        return Err(RgspError::DimensionMismatch(format!("{:?} vs {:?}", estimate.shape(), truth.shape())));
    }
    let denom = truth.norm_squared();
    if denom == 0.0 {
        return Err(RgspError::ZeroReference);
    }
    Ok((estimate - truth).norm_squared() / denom)
}

pub fn nerr_vec(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(RgspError::DimensionMismatch(format!("{} vs {}", estimate.len(), truth.len())));
    }
    let denom = truth.norm_squared();
    if denom == 0.0 {
        return Err(RgspError::ZeroReference);
    }
    Ok((estimate - truth).norm_squared() / denom)
}

/// Indices with |v_i| > tol.
pub fn support(v: &DVector<f64>, tol: f64) -> Vec<usize> {
    (0..v.len()).filter(|&i| v[i].abs() > tol).collect()
}

/// F-score between estimated and true index sets.
pub fn support_fscore(estimate: &[usize], truth: &[usize]) -> f64 {
    if estimate.is_empty() && truth.is_empty() {
        return 1.0;
    }
    let t: std::collections::HashSet<usize> = truth.iter().copied().collect();
    let hits = estimate.iter().filter(|i| t.contains(i)).count();
    2.0 * hits as f64 / (estimate.len() + truth.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GsoKind;
    use crate::graphgen::{random_graph, GraphModel};

    fn er12() -> Gso {
        random_graph(GraphModel::Er { n: 12, p: 0.4 }, 3).unwrap()
    }

    #[test]
    fn bandlimited_lies_in_subspace() {
        let g = er12();
        let s = generate_signal(&g, &SignalModel::Bandlimited { k: 4 }, 6, 1).unwrap();
        for c in 0..6 {
            let x: DVector<f64> = s.x.column(c).into_owned();
            let proj = denoise_bandlimited(&g, &x, 4).unwrap();
            assert!((proj - &x).norm() < 1e-10 * x.norm());
        }
        // full bandwidth reproduces anything
        let x = DVector::from_fn(12, |i, _| (i as f64).cos());
        let proj = denoise_bandlimited(&g, &x, 12).unwrap();
        assert!((proj - &x).norm() < 1e-9);
    }

    #[test]
    fn dsgs_identity_filter_returns_seed() {
        let g = er12();
        let s = generate_signal(&g, &SignalModel::Dsgs { sparsity: 1, coeffs: vec![1.0] }, 4, 9).unwrap();
        let seeds = s.seeds.unwrap();
        assert_eq!(s.x, seeds);
        for (c, sup) in s.supports.unwrap().iter().enumerate() {
            assert_eq!(sup.len(), 1);
            assert_eq!(support(&seeds.column(c).into_owned(), 0.0), *sup);
        }
    }

    #[test]
    fn stationary_white_covariance_commutes() {
        let g = random_graph(GraphModel::Er { n: 8, p: 0.5 }, 17).unwrap();
        let s = generate_signal(&g, &SignalModel::StationaryWhite { coeffs: vec![1.0, 0.5, 0.2] }, 100_000, 5).unwrap();
        let m = s.x.ncols() as f64;
        let cov = &s.x * s.x.transpose() / m;
        let rel = la::commutator_norm(&cov, g.matrix()) / (cov.norm() * g.matrix().norm());
        assert!(rel < 0.05, "relative commutator {rel}");
    }

    #[test]
    fn smooth_signals_have_low_variation() {
        let g = er12();
        let s = generate_signal(&g, &SignalModel::Smooth { alpha: 5.0 }, 40, 2).unwrap();
        let l = g.laplacian().unwrap();
        let mut smooth_tv = 0.0;
        let mut white_tv = 0.0;
        let mut rng = seeded_rng(7, &[4]);
        for c in 0..40 {
            let x: DVector<f64> = s.x.column(c).into_owned();
            smooth_tv += (x.transpose() * &l * &x)[0] / x.norm_squared();
            let w = DVector::from_fn(12, |_, _| rand_distr::StandardNormal.sample(&mut rng));
            white_tv += (w.transpose() * &l * &w)[0] / w.norm_squared();
        }
        assert!(smooth_tv < 0.5 * white_tv);
    }

    #[test]
    fn diffused_median_on_edgeless_graph_is_diffusion() {
        let g = Gso::new(DMatrix::zeros(5, 5), GsoKind::Adjacency).unwrap();
        let s = generate_signal(&g, &SignalModel::DiffusedMedian { coeffs: vec![2.0] }, 3, 8).unwrap();
        let w = generate_signal(&g, &SignalModel::StationaryWhite { coeffs: vec![2.0] }, 3, 8).unwrap();
        assert_eq!(s.x, w.x);
    }

    #[test]
    fn projector_is_idempotent_and_contracts() {
        let g = er12();
        let mut rng = seeded_rng(5, &[6]);
        let x0s = generate_signal(&g, &SignalModel::Bandlimited { k: 3 }, 1, 11).unwrap();
        let x0: DVector<f64> = x0s.x.column(0).into_owned();
        let noise = DVector::from_fn(12, |_, _| rand_distr::StandardNormal.sample(&mut rng));
        let x = &x0 + &noise;
        let once = denoise_bandlimited(&g, &x, 3).unwrap();
        let twice = denoise_bandlimited(&g, &once, 3).unwrap();
        assert!((&twice - &once).norm() <= 1e-12 * once.norm().max(1.0));
        assert!((&once - &x0).norm() <= noise.norm() + 1e-12);
    }

    #[test]
    fn quadratic_denoiser_limits() {
        // connected by construction, so null(L) = span(1)
        let g = random_graph(GraphModel::Caveman { cliques: 3, size: 4 }, 1).unwrap();
        let x = DVector::from_fn(12, |i, _| (i as f64 * 0.7).sin() + 2.0);
        assert_eq!(denoise_quadratic(&g, &x, 0.0, &QuadRegularizer::LaplacianQuadratic).unwrap(), x);
        // defining equation residual
        let alpha = 0.8;
        let x0 = denoise_quadratic(&g, &x, alpha, &QuadRegularizer::LaplacianQuadratic).unwrap();
        let l = g.laplacian().unwrap();
        let resid = (&x0 + alpha * (&l * &x0) - &x).norm();
        assert!(resid < 1e-9);
        // large alpha drives toward the mean on a connected graph
        let flat = denoise_quadratic(&g, &x, 1e6, &QuadRegularizer::LaplacianQuadratic).unwrap();
        let mean = x.sum() / 12.0;
        assert!(flat.iter().all(|v| (v - mean).abs() < 1e-3));
    }

    #[test]
    fn filter_smoothness_regularizer_matches_direct_solve() {
        let g = er12();
        let hp = GraphFilter::new(&g, &[1.0, -0.3, 0.05]).unwrap();
        let x = DVector::from_fn(12, |i, _| ((i * i) as f64).sin());
        let got = denoise_quadratic(&g, &x, 0.5, &QuadRegularizer::FilterSmoothness(&hp)).unwrap();
        let q = hp.matrix().transpose() * hp.matrix();
        let a = DMatrix::identity(12, 12) + 0.5 * q;
        let expect = a.lu().solve(&DMatrix::from_column_slice(12, 1, x.as_slice())).unwrap();
        assert!((got - DVector::from_column_slice(expect.as_slice())).norm() < 1e-9);
    }

    #[test]
    fn nerr_examples() {
        let t = DMatrix::from_row_slice(2, 1, &[3.0, 4.0]);
        assert_eq!(nerr(&t, &t).unwrap(), 0.0);
        assert_eq!(nerr(&(2.0 * &t), &t).unwrap(), 1.0);
        assert_eq!(nerr(&DMatrix::zeros(2, 1), &t).unwrap(), 1.0);
        assert!(matches!(nerr(&t, &DMatrix::zeros(2, 1)), Err(RgspError::ZeroReference)));
    }

    #[test]
    fn fscore_cases() {
        assert_eq!(support_fscore(&[1, 2, 3], &[1, 2, 3]), 1.0);
        assert_eq!(support_fscore(&[], &[]), 1.0);
        assert_eq!(support_fscore(&[1], &[2]), 0.0);
        assert!((support_fscore(&[1, 2], &[2, 3]) - 0.5).abs() < 1e-12);
    }
}
