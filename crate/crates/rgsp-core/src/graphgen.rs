//! Random graph generators. All of them return unweighted symmetric
//! adjacency operators and are deterministic under a fixed seed.

use crate::error::{Result, RgspError};
use crate::graph::{Gso, GsoKind};
use crate::rng::seeded_rng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

/// Random graph families.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum GraphModel {
    /// Erdos-Renyi with edge probability p.
    Er { n: usize, p: f64 },
    /// Stochastic block model with k contiguous near-equal communities.
    Sbm { n: usize, k: usize, p_in: f64, p_out: f64 },
    /// Watts-Strogatz ring lattice (k neighbours, k even) with rewiring probability beta.
    SmallWorld { n: usize, k: usize, beta: f64 },
    /// Uniform d-regular graph via the pairing model.
    Regular { n: usize, d: usize },
    /// Preferential attachment with triangle closure (m edges per new node).
    PowerlawCluster { n: usize, m: usize, p_triangle: f64 },
    /// Ring of cliques: `cliques` cliques of size `size`, one edge per clique
    /// rewired to join consecutive cliques so the graph stays connected.
    Caveman { cliques: usize, size: usize },
}

impl GraphModel {
    pub fn n(&self) -> usize {
        match *self {
            GraphModel::Er { n, .. }
            | GraphModel::Sbm { n, .. }
            | GraphModel::SmallWorld { n, .. }
            | GraphModel::Regular { n, .. }
            | GraphModel::PowerlawCluster { n, .. } => n,
            GraphModel::Caveman { cliques, size } => cliques * size,
        }
    }
}

fn check_prob(p: f64, name: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(RgspError::InvalidParams(format!("{name} = {p} outside [0, 1]")));
    }
    Ok(())
}

/// Community labels for n nodes split into k contiguous near-equal blocks.
pub fn sbm_membership(n: usize, k: usize) -> Vec<usize> {
    let base = n / k;
    let extra = n % k;
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        let size = base + usize::from(c < extra);
        labels.extend(std::iter::repeat_n(c, size));
    }
    labels
}

/// Draw a graph from `model` with the given seed.
pub fn random_graph(model: GraphModel, seed: u64) -> Result<Gso> {
    let mut rng = seeded_rng(seed, &[0x0067_7261_7068_u64]);
    let edges = match model {
        GraphModel::Er { n, p } => {
            if n == 0 {
                return Err(RgspError::InvalidParams("n must be positive".into()));
            }
            check_prob(p, "p")?;
            let mut e = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if rng.random::<f64>() < p {
                        e.push((i, j));
                    }
                }
            }
            e
        }
        GraphModel::Sbm { n, k, p_in, p_out } => {
            if n == 0 || k == 0 || k > n {
                return Err(RgspError::InvalidParams(format!("invalid SBM sizes n={n}, k={k}")));
            }
            check_prob(p_in, "p_in")?;
            check_prob(p_out, "p_out")?;
            let labels = sbm_membership(n, k);
            let mut e = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    let p = if labels[i] == labels[j] { p_in } else { p_out };
                    if rng.random::<f64>() < p {
                        e.push((i, j));
                    }
                }
            }
            e
        }
        GraphModel::SmallWorld { n, k, beta } => {
            check_prob(beta, "beta")?;
            if k == 0 || k % 2 != 0 || k >= n {
                return Err(RgspError::InvalidParams(format!("small-world degree k={k} must be even and < n={n}")));
            }
            let mut adj = vec![false; n * n];
            let set = |a: &mut Vec<bool>, i: usize, j: usize, v: bool| {
                a[i * n + j] = v;
                a[j * n + i] = v;
            };
            for i in 0..n {
                for d in 1..=k / 2 {
                    set(&mut adj, i, (i + d) % n, true);
                }
            }
            for i in 0..n {
                for d in 1..=k / 2 {
                    let j = (i + d) % n;
                    if rng.random::<f64>() < beta {
                        // rewire the lattice edge (i, j) to a random target
                        let candidates: Vec<usize> = (0..n).filter(|&t| t != i && !adj[i * n + t]).collect();
                        if let Some(&t) = candidates.as_slice().choose(&mut rng) {
                            set(&mut adj, i, j, false);
                            set(&mut adj, i, t, true);
                        }
                    }
                }
            }
            let mut e = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if adj[i * n + j] {
                        e.push((i, j));
                    }
                }
            }
            e
        }
        GraphModel::Regular { n, d } => {
            if d >= n || n * d % 2 != 0 {
                return Err(RgspError::InvalidParams(format!("no d-regular graph with n={n}, d={d}")));
            }
            let mut found = None;
            'attempt: for _ in 0..500 {
                let mut stubs: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, d)).collect();
                stubs.shuffle(&mut rng);
                let mut adj = vec![false; n * n];
                let mut e = Vec::with_capacity(n * d / 2);
                for pair in stubs.chunks(2) {
                    let (i, j) = (pair[0], pair[1]);
                    if i == j || adj[i * n + j] {
                        continue 'attempt;
                    }
                    adj[i * n + j] = true;
                    adj[j * n + i] = true;
                    e.push((i.min(j), i.max(j)));
                }
                found = Some(e);
                break;
            }
            found.ok_or_else(|| RgspError::NonConvergence("pairing model failed to produce a simple regular graph".into()))?
        }
        GraphModel::PowerlawCluster { n, m, p_triangle } => {
            if m == 0 || m >= n {
                return Err(RgspError::InvalidParams(format!("need 1 <= m < n, got m={m}, n={n}")));
            }
            check_prob(p_triangle, "p_triangle")?;
            let mut adj = vec![false; n * n];
            let mut nbrs: Vec<Vec<usize>> = vec![Vec::new(); n];
            let mut repeated: Vec<usize> = (0..m).collect();
            let mut e = Vec::new();
            let add = |adj: &mut Vec<bool>, nbrs: &mut Vec<Vec<usize>>, e: &mut Vec<(usize, usize)>, i: usize, j: usize| {
                adj[i * n + j] = true;
                adj[j * n + i] = true;
                nbrs[i].push(j);
                nbrs[j].push(i);
                e.push((i.min(j), i.max(j)));
            };
            for source in m..n {
                // m distinct preferential targets
                let mut targets = Vec::with_capacity(m);
                while targets.len() < m {
                    let cand = repeated[rng.random_range(0..repeated.len())];
                    if !targets.contains(&cand) {
                        targets.push(cand);
                    }
                }
                let mut target = targets.pop().unwrap();
                add(&mut adj, &mut nbrs, &mut e, source, target);
                repeated.push(target);
                let mut count = 1;
                while count < m {
                    if rng.random::<f64>() < p_triangle {
                        let hood: Vec<usize> = nbrs[target]
                            .iter()
                            .copied()
                            .filter(|&u| u != source && !adj[source * n + u])
                            .collect();
                        if let Some(&u) = hood.as_slice().choose(&mut rng) {
                            add(&mut adj, &mut nbrs, &mut e, source, u);
                            repeated.push(u);
                            count += 1;
                            continue;
                        }
                    }
                    target = targets.pop().unwrap();
                    add(&mut adj, &mut nbrs, &mut e, source, target);
                    repeated.push(target);
                    count += 1;
                }
                repeated.extend(std::iter::repeat_n(source, m));
            }
            e
        }
        GraphModel::Caveman { cliques, size } => {
            if cliques == 0 || size < 2 {
                return Err(RgspError::InvalidParams(format!("need cliques >= 1 and size >= 2, got {cliques} x {size}")));
            }
            let n = cliques * size;
            let mut adj = vec![false; n * n];
            for c in 0..cliques {
                let s = c * size;
                for i in s..s + size {
                    for j in i + 1..s + size {
                        adj[i * n + j] = true;
                    }
                }
            }
            if cliques > 1 {
                for c in 0..cliques {
                    let start = c * size;
                    // move one internal edge outward to the previous clique
                    adj[start * n + start + 1] = false;
                    let prev = (start + n - 1) % n;
                    adj[prev.min(start) * n + prev.max(start)] = true;
                }
            }
            let mut e = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if adj[i * n + j] {
                        e.push((i, j));
                    }
                }
            }
            e
        }
    };
    Gso::from_edges(model.n(), &edges, None, GsoKind::Adjacency)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn degree(g: &Gso, i: usize) -> usize {
        g.neighbors(i).len()
    }

    fn is_connected(g: &Gso) -> bool {
        let n = g.n();
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in g.neighbors(i) {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    #[test]
    fn er_determinism_and_extremes() {
        let g1 = random_graph(GraphModel::Er { n: 20, p: 0.3 }, 7).unwrap();
        let g2 = random_graph(GraphModel::Er { n: 20, p: 0.3 }, 7).unwrap();
        assert_eq!(g1.matrix(), g2.matrix());
        let empty = random_graph(GraphModel::Er { n: 10, p: 0.0 }, 1).unwrap();
        assert_eq!(empty.edges().len(), 0);
        let full = random_graph(GraphModel::Er { n: 10, p: 1.0 }, 1).unwrap();
        assert_eq!(full.edges().len(), 45);
    }

    #[test]
    fn sbm_blocks() {
        let labels = sbm_membership(10, 3);
        assert_eq!(labels, vec![0, 0, 0, 0, 1, 1, 1, 2, 2, 2]);
        // p_out = 0 leaves no cross-community edges
        let g = random_graph(GraphModel::Sbm { n: 12, k: 3, p_in: 1.0, p_out: 0.0 }, 5).unwrap();
        let labels = sbm_membership(12, 3);
        for (i, j, _) in g.edges() {
            assert_eq!(labels[i], labels[j]);
        }
        assert_eq!(g.edges().len(), 3 * 6);
    }

    #[test]
    fn small_world_degree_preserved_without_rewiring() {
        let g = random_graph(GraphModel::SmallWorld { n: 12, k: 4, beta: 0.0 }, 3).unwrap();
        for i in 0..12 {
            assert_eq!(degree(&g, i), 4);
        }
        assert!(random_graph(GraphModel::SmallWorld { n: 12, k: 3, beta: 0.1 }, 3).is_err());
    }

    #[test]
    fn regular_degrees() {
        let g = random_graph(GraphModel::Regular { n: 16, d: 3 }, 11).unwrap();
        for i in 0..16 {
            assert_eq!(degree(&g, i), 3);
        }
        assert!(random_graph(GraphModel::Regular { n: 5, d: 3 }, 1).is_err());
    }

    #[test]
    fn powerlaw_cluster_edge_count() {
        let g = random_graph(GraphModel::PowerlawCluster { n: 30, m: 2, p_triangle: 0.5 }, 9).unwrap();
        // each of the n - m new nodes adds exactly m edges
        assert_eq!(g.edges().len(), (30 - 2) * 2);
    }

    #[test]
    fn caveman_is_connected() {
        let g = random_graph(GraphModel::Caveman { cliques: 4, size: 5 }, 2).unwrap();
        assert_eq!(g.n(), 20);
        assert!(is_connected(&g));
        // single clique stays a clique
        let k = random_graph(GraphModel::Caveman { cliques: 1, size: 4 }, 2).unwrap();
        assert_eq!(k.edges().len(), 6);
    }
}
