//! Edge-perturbation models producing S_bar = S + Delta, graph distances,
//! and the filter perturbation bound.

use crate::error::{Result, RgspError};
use crate::filter::GraphFilter;
use crate::graph::{Gso, GsoKind};
use crate::la;
use crate::rng::seeded_rng;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Which side of an exact-count rewiring to perform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewireMode {
    Create,
    Destroy,
    /// Destroy round(f*|E|) existing edges and create the same number of new ones.
    Both,
}

/// Perturbation models.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PerturbMode {
    /// Independently create each non-edge w.p. `p_create` and destroy each edge w.p. `p_destroy`.
    CreateDestroy { p_create: f64, p_destroy: f64 },
    Create { p: f64 },
    Destroy { p: f64 },
    /// Flip exactly round(fraction * |E|) undirected edges per configured side;
    /// sweeps over the fraction then have zero variance in perturbation size.
    RatioRewire { fraction: f64, rewire: RewireMode },
    /// Additive Gaussian noise on existing edge weights.
    WeightNoise { sigma: f64 },
}

/// Weight assigned to created links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDist {
    /// Unit weights (matches unweighted graphs).
    #[default]
    Unit,
    /// Drawn uniformly from the multiset of existing edge weights.
    Empirical,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PerturbationSpec {
    pub mode: PerturbMode,
    #[serde(default)]
    pub weight_dist: WeightDist,
    pub seed: u64,
}

fn check_prob(p: f64, name: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(RgspError::InvalidParams(format!("{name} = {p} outside [0, 1]")));
    }
    Ok(())
}

/// Apply the perturbation to a symmetric shift operator; returns (S_bar, Delta).
///
/// Changes are drawn on the upper triangle and mirrored. The perturbed
/// operator keeps the input kind when it still satisfies that kind's
/// invariants and degrades to GenericSymmetric otherwise (e.g. weight noise
/// driving an adjacency entry negative).
pub fn perturb(gso: &Gso, spec: &PerturbationSpec) -> Result<(Gso, DMatrix<f64>)> {
    if !gso.kind().is_symmetric() {
        return Err(RgspError::InvalidParams("perturbation models require a symmetric operator".into()));
    }
    if gso.kind() == GsoKind::CombinatorialLaplacian {
        return Err(RgspError::InvalidParams("perturb edges via the adjacency, not the Laplacian".into()));
    }
    let n = gso.n();
    let s = gso.matrix();
    let mut rng = seeded_rng(spec.seed, &[0x7065_7274u64]);
    let edges: Vec<(usize, usize)> = gso.edges().iter().map(|&(i, j, _)| (i, j)).collect();
    let weights: Vec<f64> = gso.edges().iter().map(|&(_, _, w)| w).collect();
    let non_edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| s[(i, j)] == 0.0)
        .collect();
    let mut delta = DMatrix::<f64>::zeros(n, n);
    let new_weight = |rng: &mut rand_chacha::ChaCha12Rng| -> f64 {
        match spec.weight_dist {
            WeightDist::Unit => 1.0,
            WeightDist::Empirical => {
                if weights.is_empty() {
                    1.0
                } else {
                    weights[rng.random_range(0..weights.len())]
                }
            }
        }
    };
    let set = |d: &mut DMatrix<f64>, i: usize, j: usize, v: f64| {
        d[(i, j)] = v;
        d[(j, i)] = v;
    };
    match spec.mode {
        PerturbMode::CreateDestroy { p_create, p_destroy } => {
            check_prob(p_create, "p_create")?;
            check_prob(p_destroy, "p_destroy")?;
            for &(i, j) in &edges {
                if rng.random::<f64>() < p_destroy {
                    set(&mut delta, i, j, -s[(i, j)]);
                }
            }
            for &(i, j) in &non_edges {
                if rng.random::<f64>() < p_create {
                    let w = new_weight(&mut rng);
                    set(&mut delta, i, j, w);
                }
            }
        }
        PerturbMode::Create { p } => {
            check_prob(p, "p")?;
            for &(i, j) in &non_edges {
                if rng.random::<f64>() < p {
                    let w = new_weight(&mut rng);
                    set(&mut delta, i, j, w);
                }
            }
        }
        PerturbMode::Destroy { p } => {
            check_prob(p, "p")?;
            for &(i, j) in &edges {
                if rng.random::<f64>() < p {
                    set(&mut delta, i, j, -s[(i, j)]);
                }
            }
        }
        PerturbMode::RatioRewire { fraction, rewire } => {
            check_prob(fraction, "fraction")?;
            let count = (fraction * edges.len() as f64).round() as usize;
            let destroy = matches!(rewire, RewireMode::Destroy | RewireMode::Both);
            let create = matches!(rewire, RewireMode::Create | RewireMode::Both);
            if destroy {
                if count > edges.len() {
                    return Err(RgspError::InfeasiblePerturbation(format!(
                        "cannot destroy {count} of {} edges",
                        edges.len()
                    )));
                }
                let mut pool = edges.clone();
                pool.shuffle(&mut rng);
                for &(i, j) in &pool[..count] {
                    set(&mut delta, i, j, -s[(i, j)]);
                }
            }
            if create {
                if count > non_edges.len() {
                    return Err(RgspError::InfeasiblePerturbation(format!(
                        "cannot create {count} links with only {} vacant pairs",
                        non_edges.len()
                    )));
                }
                let mut pool = non_edges.clone();
                pool.shuffle(&mut rng);
                for &(i, j) in &pool[..count] {
                    let w = new_weight(&mut rng);
                    set(&mut delta, i, j, w);
                }
            }
        }
        PerturbMode::WeightNoise { sigma } => {
            if sigma < 0.0 {
                return Err(RgspError::InvalidParams(format!("sigma = {sigma} must be nonnegative")));
            }
            for &(i, j) in &edges {
                let z: f64 = StandardNormal.sample(&mut rng);
                set(&mut delta, i, j, sigma * z);
            }
        }
    }
    let sbar_mat = s + &delta;
    let sbar = Gso::new(sbar_mat.clone(), gso.kind())
        .or_else(|_| Gso::new(sbar_mat, GsoKind::GenericSymmetric))?;
    Ok((sbar, delta))
}

/// Graph distances between same-size operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphDistanceKind {
    /// Number of entries of S1 - S2 above 1e-9 (an undirected edge counts twice).
    L0,
    /// Squared weight differences summed over the union edge support.
    EdgeWeightL2,
    L1,
}

pub fn graph_distance(s1: &DMatrix<f64>, s2: &DMatrix<f64>, kind: GraphDistanceKind) -> Result<f64> {
    if s1.shape() != s2.shape() {
        return Err(RgspError::DimensionMismatch(format!("{:?} vs {:?}", s1.shape(), s2.shape())));
    }
    let d = s1 - s2;
    Ok(match kind {
        GraphDistanceKind::L0 => d.iter().filter(|v| v.abs() > 1e-9).count() as f64,
        GraphDistanceKind::EdgeWeightL2 => {
            let mut acc = 0.0;
            for i in 0..s1.nrows() {
                for j in 0..s1.ncols() {
                    if s1[(i, j)] != 0.0 || s2[(i, j)] != 0.0 {
                        acc += d[(i, j)] * d[(i, j)];
                    }
                }
            }
            acc
        }
        GraphDistanceKind::L1 => d.iter().map(|v| v.abs()).sum(),
    })
}

/// Actual filter error ||H_bar - H||_2 and its perturbation bound
/// sum_{r>=1} |h_r| r C^{r-1} ||Delta||_2 with C = max(||S||_2, ||S_bar||_2).
pub fn filter_perturbation_bound(gso: &Gso, gso_bar: &Gso, coeffs: &[f64]) -> Result<(f64, f64)> {
    if gso.n() != gso_bar.n() {
        return Err(RgspError::DimensionMismatch(format!("{} vs {}", gso.n(), gso_bar.n())));
    }
    let h = GraphFilter::new(gso, coeffs)?;
    let hbar = GraphFilter::new(gso_bar, coeffs)?;
    let lhs = la::spectral_norm(&(hbar.matrix() - h.matrix()));
    let delta_norm = la::spectral_norm(&(gso_bar.matrix() - gso.matrix()));
    let c = la::spectral_norm(gso.matrix()).max(la::spectral_norm(gso_bar.matrix()));
    let mut rhs = 0.0;
    for (r, &hr) in coeffs.iter().enumerate().skip(1) {
        rhs += hr.abs() * r as f64 * c.powi(r as i32 - 1) * delta_norm;
    }
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphgen::{random_graph, GraphModel};

    fn spec(mode: PerturbMode, seed: u64) -> PerturbationSpec {
        PerturbationSpec { mode, weight_dist: WeightDist::Unit, seed }
    }

    #[test]
    fn zero_probability_is_identity() {
        let g = random_graph(GraphModel::Er { n: 10, p: 0.3 }, 1).unwrap();
        let (sbar, delta) = perturb(&g, &spec(PerturbMode::Destroy { p: 0.0 }, 4)).unwrap();
        assert_eq!(delta, DMatrix::zeros(10, 10));
        assert_eq!(sbar.matrix(), g.matrix());
    }

    #[test]
    fn triangle_forced_destroy() {
        let g = random_graph(GraphModel::Er { n: 3, p: 1.0 }, 1).unwrap();
        let (sbar, delta) = perturb(&g, &spec(PerturbMode::Destroy { p: 1.0 }, 2)).unwrap();
        assert_eq!(delta, -g.matrix());
        assert_eq!(sbar.matrix(), &DMatrix::zeros(3, 3));
    }

    #[test]
    fn ratio_rewire_exact_counts() {
        let g = random_graph(GraphModel::Er { n: 20, p: 0.2 }, 7).unwrap();
        let e = g.edges().len();
        for (mode, expect) in [
            (RewireMode::Destroy, (0.1f64 * e as f64).round() as usize),
            (RewireMode::Create, (0.1f64 * e as f64).round() as usize),
            (RewireMode::Both, 2 * (0.1f64 * e as f64).round() as usize),
        ] {
            let (sbar, delta) =
                perturb(&g, &spec(PerturbMode::RatioRewire { fraction: 0.1, rewire: mode }, 9)).unwrap();
            let flipped = delta.iter().filter(|v| v.abs() > 1e-9).count();
            assert_eq!(flipped, 2 * expect, "mode {mode:?}");
            assert_eq!(sbar.matrix(), &(g.matrix() + &delta));
        }
    }

    #[test]
    fn unweighted_deltas_are_consistent_flips() {
        let g = random_graph(GraphModel::Er { n: 15, p: 0.25 }, 3).unwrap();
        let (_, delta) =
            perturb(&g, &spec(PerturbMode::CreateDestroy { p_create: 0.1, p_destroy: 0.3 }, 11)).unwrap();
        for i in 0..15 {
            for j in 0..15 {
                let d = delta[(i, j)];
                assert!(d == 0.0 || d == 1.0 || d == -1.0);
                if d == 1.0 {
                    assert_eq!(g.matrix()[(i, j)], 0.0);
                }
                if d == -1.0 {
                    assert_eq!(g.matrix()[(i, j)], 1.0);
                }
            }
        }
        assert_eq!(delta.transpose(), delta);
    }

    #[test]
    fn determinism() {
        let g = random_graph(GraphModel::Er { n: 15, p: 0.25 }, 3).unwrap();
        let sp = spec(PerturbMode::RatioRewire { fraction: 0.2, rewire: RewireMode::Both }, 5);
        let (a, da) = perturb(&g, &sp).unwrap();
        let (b, db) = perturb(&g, &sp).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        assert_eq!(da, db);
    }

    #[test]
    fn distances() {
        let g = random_graph(GraphModel::Er { n: 10, p: 0.3 }, 1).unwrap();
        let s = g.matrix();
        assert_eq!(graph_distance(s, s, GraphDistanceKind::L0).unwrap(), 0.0);
        assert_eq!(graph_distance(s, s, GraphDistanceKind::EdgeWeightL2).unwrap(), 0.0);
        assert_eq!(graph_distance(s, s, GraphDistanceKind::L1).unwrap(), 0.0);
        // differ in one undirected edge
        let mut t = s.clone();
        let (i, j, _) = g.edges()[0];
        t[(i, j)] = 0.0;
        t[(j, i)] = 0.0;
        assert_eq!(graph_distance(s, &t, GraphDistanceKind::L0).unwrap(), 2.0);
        assert_eq!(graph_distance(s, &t, GraphDistanceKind::L1).unwrap(), 2.0);
        // same support: edge-restricted L2 equals full Frobenius
        let w = s.map(|v| if v != 0.0 { v * 1.5 } else { 0.0 });
        let full = (s - &w).norm_squared();
        assert!((graph_distance(s, &w, GraphDistanceKind::EdgeWeightL2).unwrap() - full).abs() < 1e-12);
    }

    #[test]
    fn bound_holds_and_degenerates() {
        let g = random_graph(GraphModel::Er { n: 15, p: 0.15 }, 21).unwrap();
        let (lhs, rhs) = filter_perturbation_bound(&g, &g, &[0.3, -0.8, 0.2]).unwrap();
        assert_eq!((lhs, rhs), (0.0, 0.0));
        let (sbar, _) = perturb(&g, &spec(PerturbMode::RatioRewire { fraction: 0.05, rewire: RewireMode::Both }, 2)).unwrap();
        // constant filter: both sides vanish since the sum starts at r = 1
        let (l0, r0) = filter_perturbation_bound(&g, &sbar, &[2.5]).unwrap();
        assert_eq!((l0, r0), (0.0, 0.0));
        let mut rng = seeded_rng(13, &[8]);
        for t in 0..50 {
            let h: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (sb, _) = perturb(&g, &spec(PerturbMode::RatioRewire { fraction: 0.05, rewire: RewireMode::Both }, 100 + t)).unwrap();
            let (lhs, rhs) = filter_perturbation_bound(&g, &sb, &h).unwrap();
            assert!(lhs <= rhs + 1e-9, "violation at trial {t}: {lhs} > {rhs}");
        }
    }
}
