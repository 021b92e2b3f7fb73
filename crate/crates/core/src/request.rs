//! Unlearning requests, graph removal, and the node subsets they induce.

use serde::{Deserialize, Serialize};

use crate::error::{EtrError, Result};
use crate::graph::{k_hop_neighborhood, GraphBundle};

/// What to forget: training nodes, undirected edges, or node feature rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UnlearnRequest {
    Node { ids: Vec<usize> },
    Edge { edges: Vec<[usize; 2]> },
    Feature { ids: Vec<usize> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Node,
    Edge,
    Feature,
}

impl UnlearnRequest {
    pub fn nodes(ids: impl Into<Vec<usize>>) -> Self {
        UnlearnRequest::Node { ids: ids.into() }
    }

    pub fn edges(edges: &[(usize, usize)]) -> Self {
        UnlearnRequest::Edge {
            edges: edges.iter().map(|&(u, v)| [u, v]).collect(),
        }
    }

    pub fn features(ids: impl Into<Vec<usize>>) -> Self {
        UnlearnRequest::Feature { ids: ids.into() }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            UnlearnRequest::Node { .. } => TaskKind::Node,
            UnlearnRequest::Edge { .. } => TaskKind::Edge,
            UnlearnRequest::Feature { .. } => TaskKind::Feature,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            UnlearnRequest::Node { ids } | UnlearnRequest::Feature { ids } => ids.len(),
            UnlearnRequest::Edge { edges } => edges.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Checks ids against `graph`. Node requests may only name training nodes.
    pub fn validate(&self, graph: &GraphBundle) -> Result<()> {
        match self {
            UnlearnRequest::Node { ids } => {
                for &u in ids {
                    graph.check_node(u)?;
                    if !graph.train_mask()[u] {
                        return Err(EtrError::input(format!(
                            "node {u} is not a training node; only training nodes can be unlearned"
                        )));
                    }
                }
            }
            UnlearnRequest::Edge { edges } => {
                for &[u, v] in edges {
                    graph.check_node(u)?;
                    graph.check_node(v)?;
                    if !graph.has_edge(u, v) {
                        return Err(EtrError::input(format!(
                            "edge ({u},{v}) is not in the graph"
                        )));
                    }
                }
            }
            UnlearnRequest::Feature { ids } => {
                for &u in ids {
                    graph.check_node(u)?;
                }
            }
        }
        Ok(())
    }
}

/// Old-to-new id mapping produced by node removal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeMapping {
    pub old_to_new: Vec<Option<usize>>,
    pub new_to_old: Vec<usize>,
}

impl NodeMapping {
    pub fn identity(n: usize) -> Self {
        Self {
            old_to_new: (0..n).map(Some).collect(),
            new_to_old: (0..n).collect(),
        }
    }

    /// Maps old ids, dropping those that were removed.
    pub fn map_ids(&self, ids: &[usize]) -> Vec<usize> {
        ids.iter().filter_map(|&u| self.old_to_new[u]).collect()
    }
}

/// Applies `request` to `graph`, returning the remaining graph and the id mapping
/// (identity for edge and feature requests).
pub fn remove_request(
    graph: &GraphBundle,
    request: &UnlearnRequest,
) -> Result<(GraphBundle, NodeMapping)> {
    request.validate(graph)?;
    let n = graph.num_nodes();
    match request {
        UnlearnRequest::Node { ids } => {
            let mut removed = vec![false; n];
            for &u in ids {
                removed[u] = true;
            }
            let keep: Vec<usize> = (0..n).filter(|&u| !removed[u]).collect();
            let mut old_to_new = vec![None; n];
            for (new, &old) in keep.iter().enumerate() {
                old_to_new[old] = Some(new);
            }
            let g = graph.induced(&keep, &old_to_new);
            Ok((
                g,
                NodeMapping {
                    old_to_new,
                    new_to_old: keep,
                },
            ))
        }
        UnlearnRequest::Edge { edges } => {
            let mut drop: Vec<(usize, usize)> =
                edges.iter().map(|&[u, v]| (u.min(v), u.max(v))).collect();
            drop.sort_unstable();
            drop.dedup();
            let kept: Vec<(usize, usize)> = graph
                .edges()
                .into_iter()
                .filter(|e| drop.binary_search(e).is_err())
                .collect();
            Ok((graph.with_edges(&kept)?, NodeMapping::identity(n)))
        }
        UnlearnRequest::Feature { ids } => {
            let mut features = graph.features().clone();
            for &u in ids {
                features.row_mut(u).fill(0.0);
            }
            Ok((graph.with_features(features), NodeMapping::identity(n)))
        }
    }
}

/// Node sets driving the unlearning stages. All sets are sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeSubsets {
    /// Training nodes to forget.
    pub d_f: Vec<usize>,
    /// Training nodes within `k` hops of `d_f`, excluding `d_f`.
    pub d_k: Vec<usize>,
    /// Training nodes kept (`D \ D_f`).
    pub d_r: Vec<usize>,
    /// Training nodes affected by removed edges or zeroed features.
    pub d_i: Vec<usize>,
    pub k: usize,
}

impl NodeSubsets {
    /// Checks the structural invariants against the training set of `graph`.
    pub fn check(&self, graph: &GraphBundle) -> Result<()> {
        let train = graph.train_mask();
        let n = graph.num_nodes();
        let mut in_f = vec![false; n];
        for &u in &self.d_f {
            in_f[u] = true;
        }
        let mut in_r = vec![false; n];
        for &u in &self.d_r {
            in_r[u] = true;
        }
        let fail = |msg: &str| Err(EtrError::input(format!("subset invariant violated: {msg}")));
        if self.d_k.iter().any(|&u| in_f[u]) {
            return fail("d_f and d_k overlap");
        }
        if self.d_k.iter().any(|&u| !in_r[u]) {
            return fail("d_k not within d_r");
        }
        if self.d_f.iter().any(|&u| in_r[u]) {
            return fail("d_f and d_r overlap");
        }
        if (0..n).any(|u| train[u] != (in_f[u] || in_r[u])) {
            return fail("d_f ∪ d_r is not the training set");
        }
        if self.d_i.iter().any(|&u| !train[u]) {
            return fail("d_i contains a non-training node");
        }
        Ok(())
    }
}

/// Computes `D_f`, `D_k`, `D_r` and `D_i` for a request on the original graph.
pub fn affected_subgraph(
    graph: &GraphBundle,
    request: &UnlearnRequest,
    k: usize,
) -> Result<NodeSubsets> {
    request.validate(graph)?;
    let train = graph.train_mask();
    let only_train =
        |v: Vec<usize>| -> Vec<usize> { v.into_iter().filter(|&u| train[u]).collect() };
    let sorted_unique = |mut v: Vec<usize>| {
        v.sort_unstable();
        v.dedup();
        v
    };

    let (d_f, d_k, d_i) = match request {
        UnlearnRequest::Node { ids } => {
            let d_f = sorted_unique(only_train(ids.clone()));
            let d_k = only_train(k_hop_neighborhood(graph, &d_f, k)?);
            (d_f, d_k, Vec::new())
        }
        UnlearnRequest::Edge { edges } => {
            let ends = sorted_unique(edges.iter().flat_map(|&[u, v]| [u, v]).collect());
            let mut near = k_hop_neighborhood(graph, &ends, k.saturating_sub(1))?;
            near.extend_from_slice(&ends);
            (Vec::new(), Vec::new(), sorted_unique(only_train(near)))
        }
        UnlearnRequest::Feature { ids } => {
            let seeds = sorted_unique(ids.clone());
            let mut near = k_hop_neighborhood(graph, &seeds, k)?;
            near.extend_from_slice(&seeds);
            (Vec::new(), Vec::new(), sorted_unique(only_train(near)))
        }
    };
    let d_r = (0..graph.num_nodes())
        .filter(|&u| train[u] && d_f.binary_search(&u).is_err())
        .collect();
    Ok(NodeSubsets {
        d_f,
        d_k,
        d_r,
        d_i,
        k,
    })
}
