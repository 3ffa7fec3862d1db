//! Graph storage, dataset ingestion, node splits and neighborhood extraction.

mod neighborhood;
mod planetoid;
mod split;

use std::sync::Arc;

use crate::autodiff::{SparseMatrix, Tensor};
use crate::error::{Error, Result};

pub use neighborhood::{
    bfs_distances, context_subgraph, induced_subgraph, k_hop_layers, LayeredNeighborhood, Subgraph,
};
pub use planetoid::{
    edge_checksum, load_planetoid, read_graph_binary, write_graph_binary, write_planetoid, DatasetManifest,
    LoadStats, Planetoid,
};
pub use split::{split_nodes, NodePartition};

/// Undirected attributed graph in CSR form.
///
/// Adjacency is symmetric, has no self-loops or duplicate entries, and each row is
/// sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    offsets: Vec<usize>,
    targets: Vec<usize>,
    features: Tensor,
    feature_csr: Arc<SparseMatrix>,
    labels: Vec<usize>,
    num_classes: usize,
    class_names: Vec<String>,
    node_ids: Vec<String>,
}

/// Counts of input edges that did not make it into the adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EdgeCleanup {
    pub self_loops: usize,
    pub duplicates: usize,
}

impl Graph {
    /// Builds a graph from possibly-directed edges. Edges are symmetrized, self-loops
    /// and duplicates dropped.
    pub fn from_edges(
        features: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        edges: &[(usize, usize)],
    ) -> Result<(Self, EdgeCleanup)> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::Shape {
                op: "graph labels",
                left: features.shape(),
                right: (labels.len(), 1),
            });
        }
        let num_classes = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index {
                index: bad,
                len: num_classes,
            });
        }
        let mut cleanup = EdgeCleanup::default();
        let mut directed: Vec<(usize, usize)> = Vec::with_capacity(edges.len() * 2);
        for &(u, v) in edges {
            for x in [u, v] {
                if x >= n {
                    return Err(Error::Index { index: x, len: n });
                }
            }
            if u == v {
                cleanup.self_loops += 1;
                continue;
            }
            directed.push((u, v));
            directed.push((v, u));
        }
        directed.sort_unstable();
        let before = directed.len();
        directed.dedup();
        // Each dropped undirected duplicate removes two directed entries.
        cleanup.duplicates = (before - directed.len()) / 2;

        let mut offsets = vec![0usize; n + 1];
        for &(u, _) in &directed {
            offsets[u + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let targets = directed.into_iter().map(|(_, v)| v).collect();
        let node_ids = (0..n).map(|i| i.to_string()).collect();
        let feature_csr = Arc::new(SparseMatrix::from_dense(&features));
        Ok((
            Self {
                offsets,
                targets,
                features,
                feature_csr,
                labels,
                num_classes,
                class_names,
                node_ids,
            },
            cleanup,
        ))
    }

    /// Replaces the external node identifiers (defaults to `0..n`).
    pub fn with_node_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.num_nodes() {
            return Err(Error::Contract(format!(
                "{} node ids for {} nodes",
                ids.len(),
                self.num_nodes()
            )));
        }
        self.node_ids = ids;
        Ok(self)
    }

    #[inline]
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Number of directed adjacency entries (twice the undirected edge count).
    pub fn num_edge_entries(&self) -> usize {
        self.targets.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Sparse view of the feature matrix, shared with model inputs.
    pub fn feature_csr(&self) -> &Arc<SparseMatrix> {
        &self.feature_csr
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    #[inline]
    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.targets[self.offsets[u]..self.offsets[u + 1]]
    }

    #[inline]
    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges with `u < v`.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        (0..self.num_nodes())
            .flat_map(|u| self.neighbors(u).iter().filter(move |&&v| u < v).map(move |&v| (u, v)))
            .collect()
    }

    /// Copy of the graph where `nodes` keep their features and labels but lose every edge.
    pub fn isolate(&self, nodes: &[usize]) -> Result<Self> {
        let mut drop = vec![false; self.num_nodes()];
        for &u in nodes {
            self.check_node(u)?;
            drop[u] = true;
        }
        let mut offsets = Vec::with_capacity(self.offsets.len());
        let mut targets = Vec::with_capacity(self.targets.len());
        offsets.push(0);
        for u in 0..self.num_nodes() {
            if !drop[u] {
                targets.extend(self.neighbors(u).iter().filter(|&&v| !drop[v]));
            }
            offsets.push(targets.len());
        }
        Ok(Self {
            offsets,
            targets,
            ..self.clone()
        })
    }

    pub fn check_node(&self, u: usize) -> Result<()> {
        if u < self.num_nodes() {
            Ok(())
        } else {
            Err(Error::Index {
                index: u,
                len: self.num_nodes(),
            })
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetrizes_and_cleans_edges() {
        let (g, cleanup) = Graph::from_edges(
            Tensor::zeros(4, 1),
            vec![0; 4],
            vec!["a".into()],
            &[(0, 1), (1, 0), (2, 2), (3, 1), (0, 1)],
        )
        .unwrap();
        assert_eq!(cleanup.self_loops, 1);
        assert_eq!(cleanup.duplicates, 2);
        assert_eq!(g.neighbors(1), &[0, 3]);
        assert_eq!(g.neighbors(3), &[1]);
        assert_eq!(g.num_edge_entries(), 4);
        for u in 0..4 {
            assert!(!g.has_edge(u, u));
            for &v in g.neighbors(u) {
                assert!(g.has_edge(v, u));
            }
        }
    }

    #[test]
    fn rejects_out_of_range_labels_and_edges() {
        assert!(Graph::from_edges(Tensor::zeros(2, 1), vec![0, 3], vec!["a".into()], &[]).is_err());
        assert!(Graph::from_edges(Tensor::zeros(2, 1), vec![0, 0], vec!["a".into()], &[(0, 5)]).is_err());
    }

    #[test]
    fn isolate_removes_incident_edges() {
        let g = fixtures::graph(4, &[(0, 1), (1, 2), (2, 3)], &[0; 4], 1);
        let h = g.isolate(&[1]).unwrap();
        assert_eq!(h.undirected_edges(), vec![(2, 3)]);
        assert_eq!(h.degree(1), 0);
        assert_eq!(h.features(), g.features());
    }
}
