//! Graph representation and the normalized propagation operator.

use std::collections::VecDeque;

use crate::error::{EtrError, Result};
use crate::linalg::{CsrMatrix, Matrix};

/// Immutable attributed graph with labels and a train/test split.
///
/// Adjacency is stored as symmetric CSR without self-loops; neighbor lists
/// are sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBundle {
    name: String,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    features: Matrix,
    labels: Vec<usize>,
    train_mask: Vec<bool>,
    test_mask: Vec<bool>,
    num_classes: usize,
}

impl GraphBundle {
    /// Validates and builds a bundle from an undirected edge list.
    ///
    /// Each undirected edge must appear once (in either orientation).
    pub fn new(
        edges: &[(usize, usize)],
        features: Matrix,
        labels: Vec<usize>,
        train_mask: Vec<bool>,
        test_mask: Vec<bool>,
        num_classes: usize,
    ) -> Result<Self> {
        let n = features.rows();
        if features.cols() == 0 {
            return Err(EtrError::input("feature dimension must be positive"));
        }
        if labels.len() != n || train_mask.len() != n || test_mask.len() != n {
            return Err(EtrError::input(format!(
                "expected {n} labels and split flags, got {}/{}/{}",
                labels.len(),
                train_mask.len(),
                test_mask.len()
            )));
        }
        if num_classes == 0 {
            return Err(EtrError::input("num_classes must be positive"));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(EtrError::input(format!(
                "label {y} of node {i} is not below num_classes {num_classes}"
            )));
        }
        if let Some(i) = (0..n).find(|&i| train_mask[i] == test_mask[i]) {
            return Err(EtrError::input(format!(
                "node {i} must be in exactly one of train/test"
            )));
        }

        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in edges {
            if u >= n || v >= n {
                return Err(EtrError::input(format!(
                    "edge ({u},{v}) out of range for {n} nodes"
                )));
            }
            if u == v {
                return Err(EtrError::input(format!("self-loop at node {u}")));
            }
            adj[u].push(v);
            adj[v].push(u);
        }
        for (u, list) in adj.iter_mut().enumerate() {
            list.sort_unstable();
            if let Some(w) = list.windows(2).find(|w| w[0] == w[1]) {
                return Err(EtrError::input(format!("duplicate edge ({u},{})", w[0])));
            }
        }
        Ok(Self::from_adjacency(
            "graph".into(),
            adj,
            features,
            labels,
            train_mask,
            test_mask,
            num_classes,
        ))
    }

    fn from_adjacency(
        name: String,
        adj: Vec<Vec<usize>>,
        features: Matrix,
        labels: Vec<usize>,
        train_mask: Vec<bool>,
        test_mask: Vec<bool>,
        num_classes: usize,
    ) -> Self {
        let mut offsets = Vec::with_capacity(adj.len() + 1);
        offsets.push(0);
        let mut neighbors = Vec::with_capacity(adj.iter().map(Vec::len).sum());
        for list in adj {
            neighbors.extend(list);
            offsets.push(neighbors.len());
        }
        Self {
            name,
            offsets,
            neighbors,
            features,
            labels,
            train_mask,
            test_mask,
            num_classes,
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn train_mask(&self) -> &[bool] {
        &self.train_mask
    }

    pub fn test_mask(&self) -> &[bool] {
        &self.test_mask
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&i| self.train_mask[i])
            .collect()
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&i| self.test_mask[i])
            .collect()
    }

    #[inline]
    pub fn neighbors(&self, u: usize) -> &[usize] {
        &self.neighbors[self.offsets[u]..self.offsets[u + 1]]
    }

    pub fn degree(&self, u: usize) -> usize {
        self.offsets[u + 1] - self.offsets[u]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.num_nodes() && v < self.num_nodes() && self.neighbors(u).binary_search(&v).is_ok()
    }

    /// Undirected edges as `(u, v)` with `u < v`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes() {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    pub(crate) fn check_node(&self, u: usize) -> Result<()> {
        if u >= self.num_nodes() {
            Err(EtrError::input(format!(
                "node id {u} out of range for {} nodes",
                self.num_nodes()
            )))
        } else {
            Ok(())
        }
    }

    /// Copy with a different edge set; everything else unchanged.
    pub(crate) fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Self> {
        let g = GraphBundle::new(
            edges,
            self.features.clone(),
            self.labels.clone(),
            self.train_mask.clone(),
            self.test_mask.clone(),
            self.num_classes,
        )?;
        Ok(g.with_name(self.name.clone()))
    }

    pub(crate) fn with_features(&self, features: Matrix) -> Self {
        let mut g = self.clone();
        g.features = features;
        g
    }

    /// Induced subgraph on `keep` (ascending old ids), renumbered densely.
    pub(crate) fn induced(&self, keep: &[usize], old_to_new: &[Option<usize>]) -> Self {
        let adj = keep
            .iter()
            .map(|&u| {
                self.neighbors(u)
                    .iter()
                    .filter_map(|&v| old_to_new[v])
                    .collect::<Vec<_>>()
            })
            .collect();
        Self::from_adjacency(
            self.name.clone(),
            adj,
            self.features.select_rows(keep),
            keep.iter().map(|&u| self.labels[u]).collect(),
            keep.iter().map(|&u| self.train_mask[u]).collect(),
            keep.iter().map(|&u| self.test_mask[u]).collect(),
            self.num_classes,
        )
    }
}

/// Symmetrically normalized adjacency with self-loops, `D̂^{-1/2}(A+I)D̂^{-1/2}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationMatrix {
    csr: CsrMatrix,
}

impl PropagationMatrix {
    pub fn csr(&self) -> &CsrMatrix {
        &self.csr
    }

    pub fn num_nodes(&self) -> usize {
        self.csr.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.csr.get(i, j)
    }

    /// Nonzero columns and values of row `i` (self plus neighbors, sorted).
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        self.csr.row(i)
    }
}

pub fn build_propagation(graph: &GraphBundle) -> PropagationMatrix {
    let n = graph.num_nodes();
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / ((graph.degree(i) + 1) as f64).sqrt())
        .collect();
    let mut indptr = Vec::with_capacity(n + 1);
    let mut indices = Vec::with_capacity(graph.neighbors.len() + n);
    let mut values = Vec::with_capacity(graph.neighbors.len() + n);
    indptr.push(0);
    for i in 0..n {
        let mut self_done = false;
        for &j in graph.neighbors(i) {
            if !self_done && j > i {
                indices.push(i);
                values.push(inv_sqrt[i] * inv_sqrt[i]);
                self_done = true;
            }
            indices.push(j);
            // product of the two factors in index order so (i,j) and (j,i) agree bitwise
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            values.push(inv_sqrt[a] * inv_sqrt[b]);
        }
        if !self_done {
            indices.push(i);
            values.push(inv_sqrt[i] * inv_sqrt[i]);
        }
        indptr.push(indices.len());
    }
    PropagationMatrix {
        csr: CsrMatrix::from_parts(n, n, indptr, indices, values),
    }
}

/// Nodes at shortest-path distance `1..=k` from any seed, sorted.
pub fn k_hop_neighborhood(graph: &GraphBundle, seeds: &[usize], k: usize) -> Result<Vec<usize>> {
    let n = graph.num_nodes();
    let mut dist = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    for &s in seeds {
        graph.check_node(s)?;
        if dist[s] != 0 {
            dist[s] = 0;
            queue.push_back(s);
        }
    }
    let mut out = Vec::new();
    while let Some(u) = queue.pop_front() {
        if dist[u] == k {
            continue;
        }
        for &v in graph.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                out.push(v);
                queue.push_back(v);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

/// Seeds plus everything within `k` hops, as a membership mask.
pub(crate) fn ball_mask(graph: &GraphBundle, seeds: &[usize], k: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; graph.num_nodes()];
    for &s in seeds {
        graph.check_node(s)?;
        mask[s] = true;
    }
    for v in k_hop_neighborhood(graph, seeds, k)? {
        mask[v] = true;
    }
    Ok(mask)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn propagation_two_clique() {
        let p = build_propagation(&simple(2, &[(0, 1)], &[]));
        for i in 0..2 {
            for j in 0..2 {
                assert!((p.get(i, j) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn propagation_isolated_node_is_identity() {
        let p = build_propagation(&simple(1, &[], &[]));
        assert_eq!(p.get(0, 0), 1.0);
        assert_eq!(p.csr().nnz(), 1);
    }

    #[test]
    fn propagation_path_entries() {
        let p = build_propagation(&path(3));
        assert!((p.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-15);
        assert!((p.get(0, 1) - 0.40825).abs() < 1e-5);
        assert!((p.get(1, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.get(0, 2), 0.0);
        let (cols, _) = p.row(1);
        assert_eq!(cols, &[0, 1, 2]);
    }

    #[test]
    fn propagation_is_bitwise_symmetric() {
        let g = simple(5, &[(0, 1), (0, 4), (1, 2), (2, 3), (3, 4), (1, 3)], &[]);
        let p = build_propagation(&g);
        for i in 0..5 {
            let (cols, vals) = p.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                assert_eq!(v.to_bits(), p.get(j, i).to_bits());
                assert!(v > 0.0 && v <= 1.0);
            }
            assert!(p.get(i, i) > 0.0);
        }
    }

    #[test]
    fn k_hop_examples() {
        assert_eq!(k_hop_neighborhood(&path(4), &[0], 2).unwrap(), vec![1, 2]);
        assert!(k_hop_neighborhood(&simple(3, &[(1, 2)], &[]), &[0], 2)
            .unwrap()
            .is_empty());
        let star = simple(5, &[(0, 1), (0, 2), (0, 3), (0, 4)], &[]);
        assert_eq!(
            k_hop_neighborhood(&star, &[0], 1).unwrap(),
            vec![1, 2, 3, 4]
        );
        assert!(k_hop_neighborhood(&path(4), &[0], 0).unwrap().is_empty());
        assert!(matches!(
            k_hop_neighborhood(&path(4), &[9], 1),
            Err(EtrError::Input(_))
        ));
    }

    #[test]
    fn k_hop_excludes_all_seeds() {
        assert_eq!(
            k_hop_neighborhood(&path(5), &[1, 2], 1).unwrap(),
            vec![0, 3]
        );
    }

    #[test]
    fn construction_rejects_bad_input() {
        let f = || Matrix::from_vec(2, 1, vec![0.0, 1.0]);
        let ok_masks = || (vec![true, false], vec![false, true]);
        let (tr, te) = ok_masks();
        assert!(GraphBundle::new(&[(0, 0)], f(), vec![0, 0], tr, te, 1).is_err());
        let (tr, te) = ok_masks();
        assert!(GraphBundle::new(&[(0, 1), (1, 0)], f(), vec![0, 0], tr, te, 1).is_err());
        let (tr, te) = ok_masks();
        assert!(GraphBundle::new(&[], f(), vec![0, 2], tr, te, 2).is_err());
        assert!(
            GraphBundle::new(&[], f(), vec![0, 0], vec![true, true], vec![false, true], 1).is_err()
        );
        let (tr, te) = ok_masks();
        assert!(GraphBundle::new(&[], Matrix::zeros(2, 0), vec![0, 0], tr, te, 1).is_err());
    }

    #[test]
    fn edges_are_canonical() {
        let g = simple(4, &[(2, 1), (0, 3)], &[]);
        assert_eq!(g.edges(), vec![(0, 3), (1, 2)]);
        assert_eq!(g.num_edges(), 2);
        assert!(g.has_edge(1, 2) && g.has_edge(2, 1) && !g.has_edge(0, 1));
    }
}
