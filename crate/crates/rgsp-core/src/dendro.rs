//! Hierarchical clustering of a graph into nested partitions and the
//! upsampling operators built from them.
//!
//! An agglomerative dendrogram over geodesic (hop) distance is cut at a list
//! of resolutions. Each cut yields a coarsened graph, a parent-child
//! membership matrix to the next coarser cut, and an upsampling operator that
//! copies parent values to children and then averages over the coarsened
//! neighborhood.

use nalgebra::DMatrix;

use crate::error::{Result, RgspError};
use crate::graph::Gso;

/// Cluster-distance update rule for the agglomerative merge loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    Single,
    Complete,
    Average,
}

/// Nested partitions of a graph, coarsest level first.
///
/// Level `l` has `sizes[l]` clusters; `layer_graphs[l]` is its coarsened
/// adjacency (edge weight mass between clusters over the geometric mean of
/// cluster sizes, then row-normalized). `memberships[l-1]` maps level `l`
/// clusters to their level `l-1` parents and `upsamplers[l-1]` is the
/// corresponding interpolation operator. The degenerate single-entry cut
/// keeps one level and one identity membership.
#[derive(Debug, Clone)]
pub struct DendrogramLayers {
    pub layer_graphs: Vec<DMatrix<f64>>,
    pub memberships: Vec<DMatrix<f64>>,
    pub upsamplers: Vec<DMatrix<f64>>,
    pub assignments: Vec<Vec<usize>>,
    pub sizes: Vec<usize>,
    pub gamma: f64,
}

/// All-pairs hop distance over the undirected support of the operator.
fn hop_distances(gso: &Gso) -> DMatrix<f64> {
    let n = gso.n();
    let mat = gso.matrix();
    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && (mat[(i, j)] != 0.0 || mat[(j, i)] != 0.0) {
                adj[i].push(j);
            }
        }
    }
    let mut dist = DMatrix::from_element(n, n, f64::INFINITY);
    let mut queue = std::collections::VecDeque::new();
    for s in 0..n {
        dist[(s, s)] = 0.0;
        queue.clear();
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[(s, v)].is_infinite() {
                    dist[(s, v)] = dist[(s, u)] + 1.0;
                    queue.push_back(v);
                }
            }
        }
    }
    dist
}

struct Cluster {
    members: Vec<usize>,
    min: usize,
}

/// Canonical assignment for the current active clusters: labels are assigned
/// by ascending minimum member so cuts are reproducible.
fn snapshot(clusters: &[Option<Cluster>], n: usize) -> Vec<usize> {
    let mut order: Vec<&Cluster> = clusters.iter().flatten().collect();
    order.sort_by_key(|c| c.min);
    let mut asg = vec![0usize; n];
    for (label, c) in order.iter().enumerate() {
        for &m in &c.members {
            asg[m] = label;
        }
    }
    asg
}

/// Cluster assignments at every requested cut size, coarsest first.
fn agglomerate(gso: &Gso, sizes: &[usize], linkage: Linkage) -> Result<Vec<Vec<usize>>> {
    let n = gso.n();
    let mut dist = hop_distances(gso);
    let mut clusters: Vec<Option<Cluster>> = (0..n)
        .map(|i| Some(Cluster { members: vec![i], min: i }))
        .collect();
    let mut cuts = std::collections::HashMap::new();
    let mut active = n;
    if sizes.contains(&active) {
        cuts.insert(active, snapshot(&clusters, n));
    }
    while active > 1 {
        let mut best: Option<(f64, usize, usize, usize, usize)> = None;
        for i in 0..n {
            let Some(ci) = clusters[i].as_ref() else { continue };
            for j in i + 1..n {
                let Some(cj) = clusters[j].as_ref() else { continue };
                let key = (dist[(i, j)], ci.min.min(cj.min), ci.min.max(cj.min));
                let better = match best {
                    None => true,
                    Some((d, p, q, _, _)) => (key.0, key.1, key.2) < (d, p, q),
                };
                if better {
                    best = Some((key.0, key.1, key.2, i, j));
                }
            }
        }
        let (_, _, _, i, j) = best.expect("at least two active clusters");
        let cj = clusters[j].take().expect("active");
        let (ni, nj) = (clusters[i].as_ref().unwrap().members.len() as f64, cj.members.len() as f64);
        for k in 0..n {
            if k == i || clusters[k].is_none() {
                continue;
            }
            let dik = dist[(i, k)];
            let djk = dist[(j, k)];
            let d = match linkage {
                Linkage::Single => dik.min(djk),
                Linkage::Complete => dik.max(djk),
                Linkage::Average => (ni * dik + nj * djk) / (ni + nj),
            };
            dist[(i, k)] = d;
            dist[(k, i)] = d;
        }
        let ci = clusters[i].as_mut().unwrap();
        ci.members.extend(cj.members);
        ci.min = ci.min.min(cj.min);
        active -= 1;
        if sizes.contains(&active) {
            cuts.insert(active, snapshot(&clusters, n));
        }
    }
    sizes
        .iter()
        .map(|s| cuts.remove(s).ok_or(RgspError::InfeasibleCut(*s)))
        .collect()
}

/// Coarsened adjacency at one cut: inter-cluster edge weight mass divided by
/// the geometric mean of the cluster sizes, then row-normalized.
fn coarse_graph(gso: &Gso, asg: &[usize], k: usize) -> DMatrix<f64> {
    let mut sizes = vec![0.0f64; k];
    for &c in asg {
        sizes[c] += 1.0;
    }
    let mut a = DMatrix::zeros(k, k);
    for (u, v, w) in gso.edges() {
        let (cu, cv) = (asg[u], asg[v]);
        if cu != cv {
            a[(cu, cv)] += w;
            a[(cv, cu)] += w;
        }
    }
    for i in 0..k {
        for j in 0..k {
            if i != j {
                a[(i, j)] /= (sizes[i] * sizes[j]).sqrt();
            }
        }
    }
    for i in 0..k {
        let s: f64 = a.row(i).sum();
        if s > 0.0 {
            for j in 0..k {
                a[(i, j)] /= s;
            }
        }
    }
    a
}

/// Build nested partitions of `gso` at the cut sizes `layer_sizes`
/// (strictly increasing, last entry = N) along with the coarsened graphs,
/// membership matrices, and upsampling operators `(gamma I + (1-gamma) A) P`.
pub fn build_dendrogram_upsamplers(
    gso: &Gso,
    layer_sizes: &[usize],
    gamma: f64,
    linkage: Linkage,
) -> Result<DendrogramLayers> {
    let n = gso.n();
    if !(0.0..=1.0).contains(&gamma) {
        return Err(RgspError::InvalidParams(format!("gamma = {gamma} outside [0, 1]")));
    }
    if layer_sizes.is_empty() {
        return Err(RgspError::InvalidParams("no layer sizes".into()));
    }
    if layer_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(RgspError::InvalidParams(format!("layer sizes {layer_sizes:?} not strictly increasing")));
    }
    if layer_sizes[0] == 0 || *layer_sizes.last().unwrap() != n {
        return Err(RgspError::InvalidParams(format!(
            "layer sizes {layer_sizes:?} must lie in [1, {n}] and end at {n}"
        )));
    }

    if layer_sizes.len() == 1 {
        let identity: Vec<usize> = (0..n).collect();
        let a = coarse_graph(gso, &identity, n);
        let up = DMatrix::identity(n, n) * gamma + &a * (1.0 - gamma);
        return Ok(DendrogramLayers {
            layer_graphs: vec![a],
            memberships: vec![DMatrix::identity(n, n)],
            upsamplers: vec![up],
            assignments: vec![identity],
            sizes: vec![n],
            gamma,
        });
    }

    let assignments = agglomerate(gso, layer_sizes, linkage)?;
    let layer_graphs: Vec<DMatrix<f64>> = assignments
        .iter()
        .zip(layer_sizes)
        .map(|(asg, &k)| coarse_graph(gso, asg, k))
        .collect();

    let mut memberships = Vec::new();
    let mut upsamplers = Vec::new();
    for l in 1..layer_sizes.len() {
        let (fine, coarse) = (&assignments[l], &assignments[l - 1]);
        let mut p = DMatrix::zeros(layer_sizes[l], layer_sizes[l - 1]);
        for u in 0..n {
            p[(fine[u], coarse[u])] = 1.0;
        }
        if p.row_iter().any(|r| r.sum() != 1.0) {
            return Err(RgspError::InvalidStructure("partition nesting violated".into()));
        }
        let k = layer_sizes[l];
        let h = DMatrix::identity(k, k) * gamma + &layer_graphs[l] * (1.0 - gamma);
        upsamplers.push(&h * &p);
        memberships.push(p);
    }

    Ok(DendrogramLayers {
        layer_graphs,
        memberships,
        upsamplers,
        assignments,
        sizes: layer_sizes.to_vec(),
        gamma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GsoKind;
    use approx::assert_abs_diff_eq;

    fn path4() -> Gso {
        Gso::from_edges(4, &[(0, 1), (1, 2), (2, 3)], None, GsoKind::Adjacency).unwrap()
    }

    #[test]
    fn path_graph_two_levels() {
        let g = path4();
        let d = build_dendrogram_upsamplers(&g, &[2, 4], 0.5, Linkage::Average).unwrap();
        // ties at hop distance 1 resolve lexicographically: (0,1) then (2,3)
        assert_eq!(d.assignments[0], vec![0, 0, 1, 1]);
        assert_eq!(d.assignments[1], vec![0, 1, 2, 3]);
        // one original edge joins the clusters; sizes 2 and 2; row-normalized
        assert_abs_diff_eq!(d.layer_graphs[0], DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), epsilon = 1e-12);
        let p = &d.memberships[0];
        assert_eq!(p.shape(), (4, 2));
        for r in p.row_iter() {
            assert_eq!(r.sum(), 1.0);
        }
        assert_eq!(p.column(0).sum(), 2.0);
        let h = DMatrix::identity(4, 4) * 0.5 + &d.layer_graphs[1] * 0.5;
        assert_abs_diff_eq!(d.upsamplers[0], &h * p, epsilon = 1e-12);
    }

    #[test]
    fn gamma_one_copies_parents() {
        let g = path4();
        let d = build_dendrogram_upsamplers(&g, &[2, 4], 1.0, Linkage::Average).unwrap();
        assert_abs_diff_eq!(d.upsamplers[0], d.memberships[0], epsilon = 1e-15);
    }

    #[test]
    fn degenerate_single_level() {
        let g = path4();
        let d = build_dendrogram_upsamplers(&g, &[4], 0.3, Linkage::Average).unwrap();
        assert_eq!(d.memberships[0], DMatrix::identity(4, 4));
        // middle node of the path splits its row mass between two neighbors
        let a = &d.layer_graphs[0];
        assert_abs_diff_eq!(a[(1, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a[(1, 2)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a[(0, 1)], 1.0, epsilon = 1e-12);
        let up = DMatrix::identity(4, 4) * 0.3 + a * 0.7;
        assert_abs_diff_eq!(d.upsamplers[0], up, epsilon = 1e-12);
    }

    #[test]
    fn planted_cliques_recovered_with_zero_cross_edges() {
        let mut edges = Vec::new();
        for c in 0..4 {
            let base = 3 * c;
            edges.extend([(base, base + 1), (base, base + 2), (base + 1, base + 2)]);
        }
        let g = Gso::from_edges(12, &edges, None, GsoKind::Adjacency).unwrap();
        let d = build_dendrogram_upsamplers(&g, &[4, 12], 0.5, Linkage::Average).unwrap();
        let want: Vec<usize> = (0..12).map(|u| u / 3).collect();
        assert_eq!(d.assignments[0], want);
        assert_eq!(d.layer_graphs[0], DMatrix::zeros(4, 4));
        for u in 0..12 {
            assert_eq!(d.memberships[0][(u, u / 3)], 1.0);
        }
    }

    #[test]
    fn multi_level_nesting_is_consistent() {
        let g = crate::graphgen::random_graph(crate::graphgen::GraphModel::Er { n: 10, p: 0.5 }, 3).unwrap();
        let d = build_dendrogram_upsamplers(&g, &[2, 5, 10], 0.5, Linkage::Average).unwrap();
        assert_eq!(d.upsamplers.len(), 2);
        assert_eq!(d.upsamplers[0].shape(), (5, 2));
        assert_eq!(d.upsamplers[1].shape(), (10, 5));
        for l in 1..3 {
            for u in 0..10 {
                // the fine cluster of u maps to the coarse cluster of u
                assert_eq!(d.memberships[l - 1][(d.assignments[l][u], d.assignments[l - 1][u])], 1.0);
            }
        }
        for (a, &k) in d.layer_graphs.iter().zip(&d.sizes) {
            for i in 0..k {
                let s: f64 = a.row(i).sum();
                assert!(s.abs() < 1e-12 || (s - 1.0).abs() < 1e-12, "row sum {s}");
            }
        }
    }

    #[test]
    fn linkage_variants_produce_valid_cuts() {
        let g = path4();
        for linkage in [Linkage::Single, Linkage::Complete, Linkage::Average] {
            let d = build_dendrogram_upsamplers(&g, &[2, 4], 0.5, linkage).unwrap();
            assert_eq!(d.assignments[0].iter().copied().max().unwrap(), 1);
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let g = path4();
        assert!(build_dendrogram_upsamplers(&g, &[2, 4], 1.5, Linkage::Average).is_err());
        assert!(build_dendrogram_upsamplers(&g, &[], 0.5, Linkage::Average).is_err());
        assert!(build_dendrogram_upsamplers(&g, &[4, 2], 0.5, Linkage::Average).is_err());
        assert!(build_dendrogram_upsamplers(&g, &[2, 3], 0.5, Linkage::Average).is_err());
        assert!(build_dendrogram_upsamplers(&g, &[0, 4], 0.5, Linkage::Average).is_err());
    }
}
