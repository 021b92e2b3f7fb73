//! Empirical Fisher diagonals over node subsets.
//!
//! `F_S[j] = (1/|S|) Σ_{i∈S} g_{i,j}²` where `g_i` is the gradient of the
//! observed-label log-likelihood of node `i`, evaluated on the full graph.

use serde::{Deserialize, Serialize};

use crate::error::{EtrError, Result};
use crate::gnn::{backward, node_gradient_sq_sum, ForwardTrace, GcnInput, ModelState};

/// Which node subset a Fisher diagonal was computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsetLabel {
    #[serde(rename = "D")]
    Train,
    #[serde(rename = "D_f")]
    Forget,
    #[serde(rename = "D_k")]
    Neighborhood,
    #[serde(rename = "D_r")]
    Remaining,
    #[serde(rename = "D_i")]
    Affected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherDiag {
    #[serde(rename = "label")]
    pub subset_label: SubsetLabel,
    #[serde(rename = "size")]
    pub subset_size: usize,
    pub values: Vec<f64>,
}

impl FisherDiag {
    /// All-zero diagonal standing in for an empty subset.
    pub fn empty(len: usize, label: SubsetLabel) -> Self {
        Self {
            subset_label: label,
            subset_size: 0,
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_empty_subset(&self) -> bool {
        self.subset_size == 0
    }
}

/// How the per-parameter importance is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherMode {
    /// Mean of squared per-node gradients.
    #[default]
    PerSample,
    /// Square of the mean gradient; for comparison only.
    Batch,
}

/// Fisher diagonal plus the mean per-node gradient over the same subset
/// (which equals the gradient of the mean loss over that subset).
#[derive(Debug, Clone)]
pub struct SubsetStats {
    pub fisher: FisherDiag,
    pub mean_gradient: Vec<f64>,
}

pub fn subset_stats(
    input: &GcnInput,
    trace: &ForwardTrace,
    labels: &[usize],
    model: &ModelState,
    subset: &[usize],
    label: SubsetLabel,
    mode: FisherMode,
) -> Result<SubsetStats> {
    if subset.is_empty() {
        return Err(EtrError::input(format!(
            "Fisher diagonal over empty subset {label:?}"
        )));
    }
    let mean_gradient = backward(input, trace, labels, subset, model)?;
    let values = match mode {
        FisherMode::PerSample => {
            let k = subset.len() as f64;
            let sum_sq = node_gradient_sq_sum(input, trace, labels, model, subset)?;
            sum_sq.into_iter().map(|s| s / k).collect()
        }
        FisherMode::Batch => mean_gradient.iter().map(|g| g * g).collect(),
    };
    Ok(SubsetStats {
        fisher: FisherDiag {
            subset_label: label,
            subset_size: subset.len(),
            values,
        },
        mean_gradient,
    })
}

/// Per-sample empirical Fisher diagonal of `model` over `subset`.
pub fn fisher_diag(
    input: &GcnInput,
    trace: &ForwardTrace,
    labels: &[usize],
    model: &ModelState,
    subset: &[usize],
    label: SubsetLabel,
) -> Result<FisherDiag> {
    Ok(subset_stats(
        input,
        trace,
        labels,
        model,
        subset,
        label,
        FisherMode::PerSample,
    )?
    .fisher)
}

/// Default floor added to ratio denominators.
pub const RATIO_EPS: f64 = 1e-12;

/// `num[j] / (den[j] + eps)`.
pub fn importance_ratio(num: &FisherDiag, den: &FisherDiag, eps: f64) -> Result<Vec<f64>> {
    check_len(num, den)?;
    Ok(num
        .values
        .iter()
        .zip(&den.values)
        .map(|(&a, &b)| a / (b + eps))
        .collect())
}

/// `(a[j] * b[j]) / (den[j] + eps)²`.
pub fn product_importance_ratio(
    a: &FisherDiag,
    b: &FisherDiag,
    den: &FisherDiag,
    eps: f64,
) -> Result<Vec<f64>> {
    check_len(a, den)?;
    check_len(b, den)?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .zip(&den.values)
        .map(|((&x, &y), &d)| {
            let s = d + eps;
            x * y / (s * s)
        })
        .collect())
}

fn check_len(a: &FisherDiag, b: &FisherDiag) -> Result<()> {
    if a.len() != b.len() {
        return Err(EtrError::input(format!(
            "Fisher diagonals differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}
