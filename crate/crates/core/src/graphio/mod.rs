//! Graph collections: TUDataset parsing, node features, stratified folds,
//! mini-batching and random graph generation.

mod features;
mod folds;
mod random;
mod tudataset;

pub use features::{build_features, FeatureScheme, DEFAULT_DEGREE_CAP};
pub use folds::{batches, stratified_folds, stratified_holdout, FoldPlan};
pub use random::erdos_renyi;
pub use tudataset::{parse_tudataset, write_tudataset};

use crate::error::{Error, Result};
use crate::numcore::{SparseMatrix, Tensor};

/// Undirected simple graph structure. Edges are stored once as `(u, v)` with
/// `u < v`, sorted, without self-loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    edges: Vec<(usize, usize)>,
}

impl Adjacency {
    /// Canonicalises `edges`: orientation, duplicates and self-loops are
    /// dropped.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut canon = Vec::new();
        for (u, v) in edges {
            for w in [u, v] {
                if w >= n {
                    return Err(Error::Index {
                        what: "edge endpoint",
                        index: w,
                        len: n,
                    });
                }
            }
            if u != v {
                canon.push((u.min(v), u.max(v)));
            }
        }
        canon.sort_unstable();
        canon.dedup();
        Ok(Adjacency { n, edges: canon })
    }

    pub fn empty(n: usize) -> Self {
        Adjacency { n, edges: Vec::new() }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u != v && self.edges.binary_search(&(u.min(v), u.max(v))).is_ok()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Dense symmetric 0/1 matrix, optionally with the identity added.
    pub fn dense(&self, self_loops: bool) -> Tensor {
        let mut t = Tensor::zeros(self.n, self.n);
        for &(u, v) in &self.edges {
            t.set(u, v, 1.0);
            t.set(v, u, 1.0);
        }
        if self_loops {
            for i in 0..self.n {
                t.set(i, i, 1.0);
            }
        }
        t
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` with degrees taken from `A + I`.
    pub fn gcn_normalized(&self) -> SparseMatrix {
        let inv_sqrt: Vec<f64> = self
            .degrees()
            .into_iter()
            .map(|d| 1.0 / ((d + 1) as f64).sqrt())
            .collect();
        let mut triplets = Vec::with_capacity(self.n + 2 * self.edges.len());
        for i in 0..self.n {
            triplets.push((i, i, inv_sqrt[i] * inv_sqrt[i]));
        }
        for &(u, v) in &self.edges {
            let w = inv_sqrt[u] * inv_sqrt[v];
            triplets.push((u, v, w));
            triplets.push((v, u, w));
        }
        SparseMatrix::from_triplets(self.n, self.n, &triplets)
    }

    /// Subgraph induced by `idx`, relabelled so that `idx[i]` becomes `i`.
    pub fn induced(&self, idx: &[usize]) -> Result<Adjacency> {
        let mut local = vec![usize::MAX; self.n];
        for (i, &v) in idx.iter().enumerate() {
            if v >= self.n {
                return Err(Error::Index {
                    what: "induced subgraph node",
                    index: v,
                    len: self.n,
                });
            }
            local[v] = i;
        }
        let edges = self.edges.iter().filter_map(|&(u, v)| {
            let (a, b) = (local[u], local[v]);
            (a != usize::MAX && b != usize::MAX).then_some((a, b))
        });
        Adjacency::new(idx.len(), edges)
    }
}

/// One labelled graph of a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    pub adjacency: Adjacency,
    /// Node features, `n × d`. Empty (`n × 0`) until [`build_features`] runs.
    pub x: Tensor,
    pub label: usize,
    /// Raw discrete node labels, when the source provides them.
    pub node_labels: Option<Vec<i64>>,
    /// Raw continuous node attributes, when the source provides them.
    pub node_attributes: Option<Vec<Vec<f64>>>,
}

impl Graph {
    pub fn new(adjacency: Adjacency, x: Tensor, label: usize) -> Result<Self> {
        if x.rows() != adjacency.n() {
            return Err(Error::Dimension {
                op: "Graph::new",
                lhs: x.shape(),
                rhs: (adjacency.n(), adjacency.n()),
            });
        }
        Ok(Graph {
            adjacency,
            x,
            label,
            node_labels: None,
            node_attributes: None,
        })
    }

    pub fn n(&self) -> usize {
        self.adjacency.n()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        self.adjacency.edges()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    /// Column count of every `x`.
    pub feature_dim: usize,
    /// Original graph label values; class `c` was read as `class_values[c]`.
    pub class_values: Vec<i64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for g in &self.graphs {
            counts[g.label] += 1;
        }
        counts
    }

    pub fn avg_nodes(&self) -> f64 {
        if self.graphs.is_empty() {
            return 0.0;
        }
        self.graphs.iter().map(Graph::n).sum::<usize>() as f64 / self.graphs.len() as f64
    }

    /// Fraction of graphs in the most frequent class.
    pub fn majority_rate(&self) -> f64 {
        let counts = self.class_counts();
        *counts.iter().max().unwrap_or(&0) as f64 / self.len().max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacency_canonicalises() {
        let a = Adjacency::new(3, [(1, 0), (0, 1), (2, 2), (1, 2)]).unwrap();
        assert_eq!(a.edges(), &[(0, 1), (1, 2)]);
        assert!(a.has_edge(2, 1));
        assert!(!a.has_edge(0, 2));
        assert!(Adjacency::new(2, [(0, 2)]).is_err());
    }

    #[test]
    fn induced_relabels() {
        // path a-b-c-d, keep b and c
        let a = Adjacency::new(4, [(0, 1), (1, 2), (2, 3)]).unwrap();
        let sub = a.induced(&[1, 2]).unwrap();
        assert_eq!(sub.n(), 2);
        assert_eq!(sub.edges(), &[(0, 1)]);
        assert_eq!(a.induced(&[0, 3]).unwrap().num_edges(), 0);
    }

    #[test]
    fn gcn_normalisation_of_isolated_node_is_one() {
        let a = Adjacency::empty(1);
        assert_eq!(a.gcn_normalized().to_dense().data(), &[1.0]);
    }

    #[test]
    fn gcn_normalisation_is_symmetric() {
        let a = Adjacency::new(3, [(0, 1), (1, 2)]).unwrap();
        let d = a.gcn_normalized().to_dense();
        assert!(d.max_abs_diff(&d.transpose()) < 1e-15);
        // D̃ = diag(2, 3, 2)
        assert!((d.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((d.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
    }
}
