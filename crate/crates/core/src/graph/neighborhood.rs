use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, OnceLock};

use super::Graph;
use crate::autodiff::SparseMatrix;
use crate::error::Result;

/// Hop distance from the nearest seed, or `None` when farther than `max_depth`
/// (or unreachable).
pub fn bfs_distances(graph: &Graph, seeds: &[usize], max_depth: usize) -> Result<Vec<Option<usize>>> {
    let mut dist = vec![None; graph.num_nodes()];
    let mut queue = VecDeque::new();
    for &s in seeds {
        graph.check_node(s)?;
        if dist[s].is_none() {
            dist[s] = Some(0);
            queue.push_back(s);
        }
    }
    while let Some(u) = queue.pop_front() {
        let d = dist[u].unwrap_or(0);
        if d == max_depth {
            continue;
        }
        for &v in graph.neighbors(u) {
            if dist[v].is_none() {
                dist[v] = Some(d + 1);
                queue.push_back(v);
            }
        }
    }
    Ok(dist)
}

/// Seed-centred rings: `layers[i]` holds the nodes at exact hop distance `i + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayeredNeighborhood {
    pub seeds: Vec<usize>,
    pub layers: Vec<Vec<usize>>,
}

impl LayeredNeighborhood {
    /// Number of leading layers that are nonempty.
    pub fn depth(&self) -> usize {
        self.layers.iter().take_while(|l| !l.is_empty()).count()
    }

    /// Subgraph holding layer `i` plus everything within `hops` of it, enough for a
    /// `hops`-layer forward pass on that layer.
    pub fn layer_subgraph(&self, graph: &Graph, i: usize, hops: usize) -> Result<Subgraph> {
        context_subgraph(graph, &self.layers[i], hops)
    }
}

/// Computes the `k + 1` rings around `seeds`. Distances are measured on the full
/// graph; `exclude` is removed from the rings afterwards.
pub fn k_hop_layers(
    graph: &Graph,
    seeds: &[usize],
    k: usize,
    exclude: &[usize],
) -> Result<LayeredNeighborhood> {
    let dist = bfs_distances(graph, seeds, k + 1)?;
    let mut excluded = vec![false; graph.num_nodes()];
    for &x in exclude {
        graph.check_node(x)?;
        excluded[x] = true;
    }
    let mut layers = vec![Vec::new(); k + 1];
    for (u, d) in dist.iter().enumerate() {
        if let Some(d) = *d {
            if d >= 1 && !excluded[u] {
                layers[d - 1].push(u);
            }
        }
    }
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    Ok(LayeredNeighborhood { seeds, layers })
}

/// Induced subgraph with local indices `0..len`, local order ascending by global id.
///
/// Node degrees are the degrees in the parent graph, so GCN normalization inside
/// the subgraph reproduces the full-graph operator on every row whose neighborhood
/// is fully contained.
#[derive(Debug)]
pub struct Subgraph {
    nodes: Vec<usize>,
    local: HashMap<usize, usize>,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    global_degrees: Vec<usize>,
    features: Arc<SparseMatrix>,
    gcn_adjacency: OnceLock<Arc<SparseMatrix>>,
}

impl Subgraph {
    pub fn full(graph: &Graph) -> Self {
        let n = graph.num_nodes();
        Self {
            nodes: (0..n).collect(),
            local: (0..n).map(|i| (i, i)).collect(),
            offsets: graph.offsets().to_vec(),
            targets: graph.targets().to_vec(),
            global_degrees: (0..n).map(|u| graph.degree(u)).collect(),
            features: Arc::clone(graph.feature_csr()),
            gcn_adjacency: OnceLock::new(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edge_entries(&self) -> usize {
        self.targets.len()
    }

    /// Local → global map.
    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn global(&self, local: usize) -> usize {
        self.nodes[local]
    }

    pub fn local(&self, global: usize) -> Option<usize> {
        self.local.get(&global).copied()
    }

    /// Maps global ids to local ids, failing on any id outside the subgraph.
    pub fn locals(&self, globals: &[usize]) -> Result<Vec<usize>> {
        globals
            .iter()
            .map(|&g| {
                self.local(g).ok_or(crate::error::Error::Index {
                    index: g,
                    len: self.num_nodes(),
                })
            })
            .collect()
    }

    pub fn neighbors(&self, local: usize) -> &[usize] {
        &self.targets[self.offsets[local]..self.offsets[local + 1]]
    }

    /// Degree of the node in the parent graph.
    pub fn global_degree(&self, local: usize) -> usize {
        self.global_degrees[local]
    }

    /// Local undirected edges with `u < v`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes())
            .flat_map(|u| self.neighbors(u).iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
            .collect()
    }

    /// Sparse feature rows of the subgraph nodes, in local order.
    pub fn features(&self) -> &Arc<SparseMatrix> {
        &self.features
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` with parent-graph degrees, built once.
    pub fn gcn_adjacency(&self) -> Arc<SparseMatrix> {
        Arc::clone(self.gcn_adjacency.get_or_init(|| {
            let n = self.num_nodes();
            let inv_sqrt: Vec<f64> = self
                .global_degrees
                .iter()
                .map(|&d| 1.0 / ((d + 1) as f64).sqrt())
                .collect();
            let mut offsets = Vec::with_capacity(n + 1);
            let mut indices = Vec::with_capacity(self.targets.len() + n);
            let mut values = Vec::with_capacity(self.targets.len() + n);
            offsets.push(0);
            for u in 0..n {
                let mut row: Vec<usize> = self.neighbors(u).to_vec();
                let pos = row.partition_point(|&v| v < u);
                row.insert(pos, u);
                for v in row {
                    indices.push(v);
                    values.push(inv_sqrt[u] * inv_sqrt[v]);
                }
                offsets.push(indices.len());
            }
            Arc::new(
                SparseMatrix::new(n, n, offsets, indices, values)
                    .expect("normalized adjacency is well formed"),
            )
        }))
    }

    /// `A + self_weight · I`, the sum aggregator of GIN.
    pub fn sum_adjacency(&self, self_weight: f64) -> Arc<SparseMatrix> {
        let n = self.num_nodes();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(self.targets.len() + n);
        let mut values = Vec::with_capacity(self.targets.len() + n);
        offsets.push(0);
        for u in 0..n {
            let row = self.neighbors(u);
            let pos = row.partition_point(|&v| v < u);
            for &v in &row[..pos] {
                indices.push(v);
                values.push(1.0);
            }
            if self_weight != 0.0 {
                indices.push(u);
                values.push(self_weight);
            }
            for &v in &row[pos..] {
                indices.push(v);
                values.push(1.0);
            }
            offsets.push(indices.len());
        }
        Arc::new(SparseMatrix::new(n, n, offsets, indices, values).expect("sum adjacency is well formed"))
    }
}

/// Induced subgraph on `nodes` (duplicates ignored).
pub fn induced_subgraph(graph: &Graph, nodes: &[usize]) -> Result<Subgraph> {
    for &u in nodes {
        graph.check_node(u)?;
    }
    let mut nodes = nodes.to_vec();
    nodes.sort_unstable();
    nodes.dedup();
    let local: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &g)| (g, i)).collect();
    let mut offsets = Vec::with_capacity(nodes.len() + 1);
    let mut targets = Vec::new();
    offsets.push(0);
    for &g in &nodes {
        // Parent rows are sorted and the local map is monotone, so local rows stay sorted.
        targets.extend(graph.neighbors(g).iter().filter_map(|v| local.get(v).copied()));
        offsets.push(targets.len());
    }
    let global_degrees = nodes.iter().map(|&g| graph.degree(g)).collect();
    let features = Arc::new(graph.feature_csr().select_rows(&nodes));
    Ok(Subgraph {
        nodes,
        local,
        offsets,
        targets,
        global_degrees,
        features,
        gcn_adjacency: OnceLock::new(),
    })
}

/// Induced subgraph on `targets` and every node within `hops` of them.
pub fn context_subgraph(graph: &Graph, targets: &[usize], hops: usize) -> Result<Subgraph> {
    let dist = bfs_distances(graph, targets, hops)?;
    let nodes: Vec<usize> = (0..graph.num_nodes()).filter(|&u| dist[u].is_some()).collect();
    induced_subgraph(graph, &nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures;
    use proptest::prelude::*;

    #[test]
    fn path_layers() {
        let g = fixtures::path(4);
        let l = k_hop_layers(&g, &[0], 2, &[]).unwrap();
        assert_eq!(l.layers, vec![vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn star_with_exclusion() {
        // center 0, leaves 1 (x), 2 (y), 3 (z)
        let g = fixtures::graph(4, &[(0, 1), (0, 2), (0, 3)], &[0; 4], 1);
        let l = k_hop_layers(&g, &[1], 1, &[2]).unwrap();
        assert_eq!(l.layers, vec![vec![0], vec![3]]);
    }

    #[test]
    fn isolated_and_all_seeds_give_empty_layers() {
        let g = fixtures::graph(3, &[(0, 1)], &[0; 3], 1);
        let l = k_hop_layers(&g, &[2], 2, &[]).unwrap();
        assert!(l.layers.iter().all(|x| x.is_empty()));
        let l = k_hop_layers(&g, &[0, 1, 2], 3, &[]).unwrap();
        assert_eq!(l.layers.len(), 4);
        assert!(l.layers.iter().all(|x| x.is_empty()));
        assert_eq!(l.depth(), 0);
    }

    #[test]
    fn triangle_subgraph() {
        let g = fixtures::graph(3, &[(0, 1), (1, 2), (0, 2)], &[0; 3], 1);
        let s = induced_subgraph(&g, &[0, 1]).unwrap();
        assert_eq!(s.num_nodes(), 2);
        assert_eq!(s.edges(), vec![(0, 1)]);
        assert_eq!(s.global_degree(0), 2);
        let full = induced_subgraph(&g, &[2, 0, 1]).unwrap();
        assert_eq!(full.edges(), g.undirected_edges());
        assert!(induced_subgraph(&g, &[7]).is_err());
    }

    #[test]
    fn gcn_adjacency_of_path() {
        let g = fixtures::path(3);
        let a = Subgraph::full(&g).gcn_adjacency().to_dense();
        let (e, m) = (1.0 / 2.0, 1.0 / 6f64.sqrt());
        let want = [[e, m, 0.0], [m, 1.0 / 3.0, m], [0.0, m, e]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.get(i, j) - want[i][j]).abs() < 1e-15);
                assert_eq!(a.get(i, j), a.get(j, i));
            }
        }
    }

    #[test]
    fn sum_adjacency_places_self_weight() {
        let g = fixtures::path(3);
        let a = Subgraph::full(&g).sum_adjacency(1.5).to_dense();
        assert_eq!(a.row(1), &[1.0, 1.5, 1.0]);
        let a0 = Subgraph::full(&g).sum_adjacency(0.0);
        assert_eq!(a0.nnz(), 4);
    }

    fn arb_graph(max_n: usize) -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2..max_n).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0..n), 0..2 * n)))
    }

    proptest! {
        #[test]
        fn induced_edges_match_filter(
            (n, edges) in arb_graph(50),
            mask in prop::collection::vec(any::<bool>(), 50),
        ) {
            let g = fixtures::graph(n, &edges, &vec![0; n], 1);
            let nodes: Vec<usize> = (0..n).filter(|&u| mask[u]).collect();
            let s = induced_subgraph(&g, &nodes).unwrap();
            let got: Vec<(usize, usize)> =
                s.edges().into_iter().map(|(a, b)| (s.global(a), s.global(b))).collect();
            let want: Vec<(usize, usize)> = g
                .undirected_edges()
                .into_iter()
                .filter(|&(a, b)| mask[a] && mask[b])
                .collect();
            prop_assert_eq!(got, want);
            for (i, &gl) in s.nodes().iter().enumerate() {
                prop_assert_eq!(s.local(gl), Some(i));
            }
        }

        #[test]
        fn layers_disjoint_and_exclusion_applied(
            (n, edges) in arb_graph(60),
            seed_mask in prop::collection::vec(prop::bool::weighted(0.1), 60),
            ex_mask in prop::collection::vec(prop::bool::weighted(0.2), 60),
            k in 1usize..4,
        ) {
            let g = fixtures::graph(n, &edges, &vec![0; n], 1);
            let mut seeds: Vec<usize> = (0..n).filter(|&u| seed_mask[u]).collect();
            if seeds.is_empty() { seeds.push(0); }
            let exclude: Vec<usize> = (0..n).filter(|&u| ex_mask[u]).collect();
            let l = k_hop_layers(&g, &seeds, k, &exclude).unwrap();
            prop_assert_eq!(l.layers.len(), k + 1);
            let mut seen = vec![false; n];
            for &s in &seeds { seen[s] = true; }
            for layer in &l.layers {
                for &u in layer {
                    prop_assert!(!seen[u]);
                    prop_assert!(!ex_mask[u]);
                    seen[u] = true;
                }
            }
        }
    }
}
