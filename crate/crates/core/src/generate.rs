//! Seeded synthetic graphs and adversarial edge injection.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_pcg::Pcg64;

use crate::error::{EtrError, Result};
use crate::graph::GraphBundle;
use crate::linalg::Matrix;

/// Standard deviation of the Gaussian noise added to SBM features.
pub const SBM_FEATURE_NOISE: f64 = 0.5;
/// Fraction of nodes placed in the training split.
pub const TRAIN_FRACTION: f64 = 0.9;

const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SbmParams {
    pub num_nodes: usize,
    pub num_classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    pub seed: u64,
}

/// Block id of node `i` for equal-size contiguous blocks.
#[inline]
pub fn sbm_block(i: usize, num_nodes: usize, num_classes: usize) -> usize {
    i * num_classes / num_nodes
}

/// Stochastic block model with equal-size blocks. Node features are the
/// one-hot class indicator plus N(0, 0.5²) noise; 90% of nodes (seeded
/// shuffle) go to the training split.
pub fn generate_sbm(params: &SbmParams) -> Result<GraphBundle> {
    let SbmParams {
        num_nodes: n,
        num_classes: c,
        p_in,
        p_out,
        feature_dim: d,
        seed,
    } = *params;
    if c == 0 || c > n {
        return Err(EtrError::input(format!(
            "num_classes ({c}) must be in 1..=num_nodes ({n})"
        )));
    }
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=p_in).contains(&p_out) {
        return Err(EtrError::input(format!(
            "need 0 <= p_out <= p_in <= 1, got p_in={p_in} p_out={p_out}"
        )));
    }
    if d < c {
        return Err(EtrError::input(format!(
            "feature_dim ({d}) must be at least num_classes ({c}) to hold the class signal"
        )));
    }

    let mut rng = Pcg64::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| sbm_block(i, n, c)).collect();

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            // random_bool(1.0) always fires and random_bool(0.0) never does
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }

    let noise = Normal::new(0.0, SBM_FEATURE_NOISE).expect("valid normal");
    let mut features = Matrix::zeros(n, d);
    for i in 0..n {
        let row = features.row_mut(i);
        for v in row.iter_mut() {
            *v = noise.sample(&mut rng);
        }
        row[labels[i]] += 1.0;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_train = (TRAIN_FRACTION * n as f64).floor() as usize;
    let mut train_mask = vec![false; n];
    for &i in &order[..n_train] {
        train_mask[i] = true;
    }
    let test_mask = train_mask.iter().map(|t| !t).collect();

    Ok(GraphBundle::new(&edges, features, labels, train_mask, test_mask, c)?.with_name("sbm"))
}

/// Adds `round(ratio * |E|)` edges between uniformly drawn training nodes of
/// different classes. Returns the poisoned graph and the added edges (`u < v`).
pub fn inject_adversarial_edges(
    graph: &GraphBundle,
    ratio: f64,
    seed: u64,
) -> Result<(GraphBundle, Vec<(usize, usize)>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(EtrError::input(format!(
            "attack ratio {ratio} not in [0, 1]"
        )));
    }
    let count = (ratio * graph.num_edges() as f64).round() as usize;
    if count == 0 {
        return Ok((graph.clone(), Vec::new()));
    }
    let train = graph.train_nodes();
    let labels = graph.labels();
    if let Some(&first) = train.first() {
        if train.iter().all(|&u| labels[u] == labels[first]) {
            return Err(EtrError::input(
                "adversarial edges need training nodes from at least two classes",
            ));
        }
    } else {
        return Err(EtrError::input("graph has no training nodes"));
    }

    let mut rng = Pcg64::seed_from_u64(seed);
    let mut existing: HashSet<(usize, usize)> = graph.edges().into_iter().collect();
    let mut added = Vec::with_capacity(count);
    while added.len() < count {
        let mut attempts = 0;
        loop {
            if attempts == MAX_REDRAWS {
                return Err(EtrError::input(format!(
                    "could not place adversarial edge {} of {count} after {MAX_REDRAWS} draws",
                    added.len() + 1
                )));
            }
            attempts += 1;
            let u = train[rng.random_range(0..train.len())];
            let v = train[rng.random_range(0..train.len())];
            if labels[u] == labels[v] {
                continue;
            }
            let e = (u.min(v), u.max(v));
            if existing.insert(e) {
                added.push(e);
                break;
            }
        }
    }
    let mut all = graph.edges();
    all.extend_from_slice(&added);
    Ok((graph.with_edges(&all)?, added))
}
