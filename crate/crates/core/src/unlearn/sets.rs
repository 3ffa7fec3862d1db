use std::sync::Arc;

use crate::autodiff::Tensor;
use crate::error::Result;
use crate::graph::Graph;

/// Positives and negatives for one batch of forgotten nodes.
///
/// Positives of `batch[i]` index into `neighbors`; negatives index into `remaining`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveSets {
    pub batch: Vec<usize>,
    pub neighbors: Vec<usize>,
    pub remaining: Vec<usize>,
    pub positives: Vec<Vec<usize>>,
    pub negatives: Vec<Vec<usize>>,
}

impl ContrastiveSets {
    /// A node takes part in the loss only when both of its sets are nonempty.
    pub fn is_active(&self, i: usize) -> bool {
        !self.positives[i].is_empty() && !self.negatives[i].is_empty()
    }

    /// Batch positions whose positive or negative set is empty.
    pub fn flagged(&self) -> Vec<usize> {
        (0..self.batch.len()).filter(|&i| !self.is_active(i)).collect()
    }

    pub(crate) fn positive_mask(&self) -> Arc<Tensor> {
        Arc::new(index_mask(&self.positives, self.neighbors.len()))
    }

    pub(crate) fn negative_mask(&self) -> Arc<Tensor> {
        Arc::new(index_mask(&self.negatives, self.remaining.len()))
    }

    pub(crate) fn active_mask(&self) -> Arc<Tensor> {
        let v = (0..self.batch.len())
            .map(|i| if self.is_active(i) { 1.0 } else { 0.0 })
            .collect();
        Arc::new(Tensor::from_vec(self.batch.len(), 1, v).expect("sized by construction"))
    }
}

fn index_mask(sets: &[Vec<usize>], cols: usize) -> Tensor {
    let mut m = Tensor::zeros(sets.len(), cols);
    for (r, s) in sets.iter().enumerate() {
        for &c in s {
            m.set(r, c, 1.0);
        }
    }
    m
}

/// Builds positive and negative sets for `batch`.
///
/// Positives are neighbors with the same label that are remaining training nodes, so
/// no test label is consulted. Negatives are members of `remaining_batch` with a
/// different label.
pub fn build_contrastive_sets(
    graph: &Graph,
    is_remaining: &[bool],
    batch: &[usize],
    remaining_batch: &[usize],
) -> Result<ContrastiveSets> {
    let labels = graph.labels();
    for &u in batch.iter().chain(remaining_batch) {
        graph.check_node(u)?;
    }
    let mut neighbors: Vec<usize> = batch
        .iter()
        .flat_map(|&v| {
            graph
                .neighbors(v)
                .iter()
                .copied()
                .filter(move |&p| is_remaining[p] && labels[p] == labels[v])
        })
        .collect();
    neighbors.sort_unstable();
    neighbors.dedup();
    let positives = batch
        .iter()
        .map(|&v| {
            graph
                .neighbors(v)
                .iter()
                .filter(|&&p| is_remaining[p] && labels[p] == labels[v])
                .map(|p| neighbors.binary_search(p).expect("collected above"))
                .collect()
        })
        .collect();
    let negatives = batch
        .iter()
        .map(|&v| {
            remaining_batch
                .iter()
                .enumerate()
                .filter(|&(_, &q)| labels[q] != labels[v])
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    Ok(ContrastiveSets {
        batch: batch.to_vec(),
        neighbors,
        remaining: remaining_batch.to_vec(),
        positives,
        negatives,
    })
}

/// For each node of `layer`, its neighbors inside `next` that are not being forgotten.
/// Anchor entries index into `next`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReconstructionAnchors {
    pub layer: Vec<usize>,
    pub next: Vec<usize>,
    pub anchors: Vec<Vec<usize>>,
}

impl ReconstructionAnchors {
    pub fn num_pairs(&self) -> usize {
        self.anchors.iter().map(Vec::len).sum()
    }
}

pub fn build_anchors(
    graph: &Graph,
    layer: &[usize],
    next: &[usize],
    is_unlearn: &[bool],
) -> Result<ReconstructionAnchors> {
    for &u in layer.iter().chain(next) {
        graph.check_node(u)?;
    }
    let mut pos = std::collections::HashMap::with_capacity(next.len());
    for (j, &u) in next.iter().enumerate() {
        pos.entry(u).or_insert(j);
    }
    let anchors = layer
        .iter()
        .map(|&v| {
            graph
                .neighbors(v)
                .iter()
                .filter(|&&s| !is_unlearn[s])
                .filter_map(|s| pos.get(s).copied())
                .collect()
        })
        .collect();
    Ok(ReconstructionAnchors {
        layer: layer.to_vec(),
        next: next.to_vec(),
        anchors,
    })
}

pub(crate) fn membership(n: usize, nodes: &[usize]) -> Vec<bool> {
    let mut m = vec![false; n];
    for &u in nodes {
        m[u] = true;
    }
    m
}
