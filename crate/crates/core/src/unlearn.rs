//! Erase (Fisher-guided parameter shrinkage) and Rectify (one corrective
//! gradient step), plus the node and edge/feature unlearning pipelines.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{EtrError, Result};
use crate::fisher::{
    importance_ratio, product_importance_ratio, subset_stats, FisherDiag, FisherMode, SubsetLabel,
    RATIO_EPS,
};
use crate::gnn::{backward, forward, GcnInput, ModelState};
use crate::graph::GraphBundle;
use crate::request::{
    affected_subgraph, remove_request, NodeMapping, NodeSubsets, TaskKind, UnlearnRequest,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EraseConfig {
    /// Fraction of parameters selected per branch, in parts per thousand.
    pub m_permille: u32,
    pub k_hops: usize,
    /// Replaces the branch-1 prefactor `a` (defaults to the threshold).
    pub a_override: Option<f64>,
    /// Replaces the branch-2 prefactor `b` (defaults to the threshold).
    pub b_override: Option<f64>,
    pub eps: f64,
    pub fisher_mode: FisherMode,
}

impl Default for EraseConfig {
    fn default() -> Self {
        Self {
            m_permille: 10,
            k_hops: 2,
            a_override: None,
            b_override: None,
            eps: RATIO_EPS,
            fisher_mode: FisherMode::PerSample,
        }
    }
}

impl EraseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_permille > 1000 {
            return Err(EtrError::input(format!(
                "m_permille {} exceeds 1000",
                self.m_permille
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(EtrError::input("eps must be positive"));
        }
        for (name, v) in [
            ("a_override", self.a_override),
            ("b_override", self.b_override),
        ] {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(EtrError::input(format!(
                        "{name} must be finite and nonnegative"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifyConfig {
    pub lambda: f64,
    /// Skip the `[0, 0.9]` range check.
    pub force: bool,
}

impl Default for RectifyConfig {
    fn default() -> Self {
        Self {
            lambda: 0.4,
            force: false,
        }
    }
}

impl RectifyConfig {
    pub const LAMBDA_RANGE: (f64, f64) = (0.0, 0.9);

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(EtrError::input("lambda must be finite and nonnegative"));
        }
        let (lo, hi) = Self::LAMBDA_RANGE;
        if !self.force && !(lo..=hi).contains(&self.lambda) {
            return Err(EtrError::input(format!(
                "lambda {} outside [{lo}, {hi}] (use force to override)",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Min / mean / max of the multipliers applied by one branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl CoefStats {
    fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Some(Self { min, mean, max })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EraseReport {
    pub branch1_count: usize,
    pub branch2_count: usize,
    /// Threshold actually applied for branch 1 (`null` when nothing was selected).
    pub gamma: Option<f64>,
    /// Threshold actually applied for branch 2.
    pub eta: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub branch1_coef: Option<CoefStats>,
    pub branch2_coef: Option<CoefStats>,
}

impl EraseReport {
    fn untouched() -> Self {
        Self {
            branch1_count: 0,
            branch2_count: 0,
            gamma: None,
            eta: None,
            a: None,
            b: None,
            branch1_coef: None,
            branch2_coef: None,
        }
    }

    pub fn edited(&self) -> usize {
        self.branch1_count + self.branch2_count
    }
}

/// Which branch, if any, edited each parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Edit {
    None,
    Branch1,
    Branch2,
}

/// Edited parameters together with the per-parameter decisions.
#[derive(Debug, Clone)]
pub struct EraseOutcome {
    pub model: ModelState,
    pub report: EraseReport,
    pub edits: Vec<Edit>,
}

/// The `r`-th largest ratio with `r = ceil(m_permille * len / 1000)`, or
/// `+inf` when `r = 0`.
pub fn select_threshold(ratios: &[f64], m_permille: u32) -> f64 {
    let len = ratios.len();
    let r = (m_permille as usize * len).div_ceil(1000).min(len);
    if r == 0 {
        return f64::INFINITY;
    }
    let mut v = ratios.to_vec();
    let (_, nth, _) = v.select_nth_unstable_by(r - 1, |a, b| b.total_cmp(a));
    *nth
}

/// Indices whose ratio is positive and at least `threshold`.
pub fn selected_indices(ratios: &[f64], threshold: f64) -> Vec<usize> {
    ratios
        .iter()
        .enumerate()
        .filter(|&(_, &r)| r > 0.0 && r >= threshold)
        .map(|(j, _)| j)
        .collect()
}

/// Zeroes the parameters in `mask_set`.
pub fn mask_baseline(model: &ModelState, mask_set: &[usize]) -> Result<ModelState> {
    let mut params = model.params().to_vec();
    for &j in mask_set {
        let slot = params.get_mut(j).ok_or_else(|| {
            EtrError::input(format!(
                "mask index {j} out of range for {} parameters",
                model.num_params()
            ))
        })?;
        *slot = 0.0;
    }
    model.with_params(params)
}

fn check_lengths(model: &ModelState, diags: &[&FisherDiag]) -> Result<()> {
    for f in diags {
        if f.len() != model.num_params() {
            return Err(EtrError::input(format!(
                "Fisher diagonal {:?} has length {}, model has {} parameters",
                f.subset_label,
                f.len(),
                model.num_params()
            )));
        }
    }
    Ok(())
}

/// Threshold and prefactor for one branch. Selection never includes a zero
/// ratio, so when the rank threshold is zero the smallest selected positive
/// ratio stands in for it.
fn branch_threshold(
    ratios: &[f64],
    m_permille: u32,
    over: Option<f64>,
) -> Option<(f64, f64, Vec<usize>)> {
    let raw = select_threshold(ratios, m_permille);
    let chosen = selected_indices(ratios, raw);
    if chosen.is_empty() {
        return None;
    }
    let t = if raw > 0.0 {
        raw
    } else {
        chosen
            .iter()
            .map(|&j| ratios[j])
            .fold(f64::INFINITY, f64::min)
    };
    Some((t, over.unwrap_or(t), chosen))
}

/// Parameters selected by the branch-1 rule: the top `m_permille` of
/// `F_Df / F_D`, as a candidate mask set.
pub fn ratio_mask_set(
    f_d: &FisherDiag,
    f_df: &FisherDiag,
    m_permille: u32,
    eps: f64,
) -> Result<Vec<usize>> {
    let r = importance_ratio(f_df, f_d, eps)?;
    Ok(branch_threshold(&r, m_permille, None)
        .map(|(_, _, chosen)| chosen)
        .unwrap_or_default())
}

/// Two-branch Erase over `D_f` and its neighborhood `D_k`.
pub fn erase(
    model: &ModelState,
    f_d: &FisherDiag,
    f_df: &FisherDiag,
    f_dk: &FisherDiag,
    config: &EraseConfig,
) -> Result<EraseOutcome> {
    config.validate()?;
    check_lengths(model, &[f_d, f_df, f_dk])?;
    let n = model.num_params();
    let mut edits = vec![Edit::None; n];
    let mut report = EraseReport::untouched();
    if f_df.is_empty_subset() {
        return Ok(EraseOutcome {
            model: model.with_params(model.params().to_vec())?,
            report,
            edits,
        });
    }
    let eps = config.eps;
    let fd = &f_d.values;
    let ff = &f_df.values;
    let mut params = model.params().to_vec();

    let r1 = importance_ratio(f_df, f_d, eps)?;
    let mut coef1 = Vec::new();
    if let Some((gamma, a, chosen)) = branch_threshold(&r1, config.m_permille, config.a_override) {
        for j in chosen {
            let mu = a * fd[j] / ff[j].max(eps);
            params[j] *= mu;
            edits[j] = Edit::Branch1;
            coef1.push(mu);
        }
        report.gamma = Some(gamma);
        report.a = Some(a);
    }

    let mut coef2 = Vec::new();
    if !f_dk.is_empty_subset() {
        let fk = &f_dk.values;
        let r2 = product_importance_ratio(f_df, f_dk, f_d, eps)?;
        if let Some((eta, b, chosen)) = branch_threshold(&r2, config.m_permille, config.b_override)
        {
            for j in chosen {
                if edits[j] != Edit::None {
                    continue;
                }
                let mu = b * fd[j] * fd[j] / (ff[j] * fk[j]).max(eps);
                params[j] *= mu;
                edits[j] = Edit::Branch2;
                coef2.push(mu);
            }
            report.eta = Some(eta);
            report.b = Some(b);
        }
    }

    report.branch1_count = coef1.len();
    report.branch2_count = coef2.len();
    report.branch1_coef = CoefStats::of(&coef1);
    report.branch2_coef = CoefStats::of(&coef2);
    Ok(EraseOutcome {
        model: model.with_params(params)?,
        report,
        edits,
    })
}

/// Single-branch Erase over the affected set `D_i` of an edge or feature request.
pub fn erase_single_subset(
    model: &ModelState,
    f_d: &FisherDiag,
    f_di: &FisherDiag,
    config: &EraseConfig,
) -> Result<EraseOutcome> {
    let none = FisherDiag::empty(f_di.len(), SubsetLabel::Neighborhood);
    erase(model, f_d, f_di, &none, config)
}

/// Subset sizes entering the node-task rectify gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RectifySizes {
    pub d: usize,
    pub d_f: usize,
    pub d_k: usize,
}

fn snapshot_of(model: &ModelState) -> Result<&[f64]> {
    let snap = model.grad_snapshot.as_deref().ok_or_else(|| {
        EtrError::State(
            "model has no stored training gradient; retrain it with this toolkit to record one"
                .into(),
        )
    })?;
    if snap.len() != model.num_params() {
        return Err(EtrError::State(
            "stored training gradient has the wrong length".into(),
        ));
    }
    Ok(snap)
}

fn check_grad(name: &str, g: &[f64], n: usize, size: usize) -> Result<()> {
    if size > 0 && g.len() != n {
        return Err(EtrError::input(format!(
            "{name} has length {}, expected {n}",
            g.len()
        )));
    }
    Ok(())
}

/// Approximate gradient of the mean loss over `D_r` at the edited parameters.
///
/// The three gradients are subset means: `grad_df_star` and `grad_dk_star` at
/// ω* on the original graph, `grad_dk_hat` at ω̂ on the remaining graph. A
/// gradient whose subset is empty is ignored.
pub fn rectify_gradient(
    model_star: &ModelState,
    sizes: RectifySizes,
    grad_df_star: &[f64],
    grad_dk_star: &[f64],
    grad_dk_hat: &[f64],
) -> Result<Vec<f64>> {
    let snap = snapshot_of(model_star)?;
    let n = snap.len();
    if sizes.d_f >= sizes.d {
        return Err(EtrError::input(format!(
            "nothing remains: |D_f| = {} of |D| = {}",
            sizes.d_f, sizes.d
        )));
    }
    check_grad("D_f gradient", grad_df_star, n, sizes.d_f)?;
    check_grad("D_k gradient", grad_dk_star, n, sizes.d_k)?;
    check_grad("edited D_k gradient", grad_dk_hat, n, sizes.d_k)?;
    let (d, f, k) = (sizes.d as f64, sizes.d_f as f64, sizes.d_k as f64);
    let r = d - f;
    let mut g: Vec<f64> = snap.iter().map(|s| d * s).collect();
    if sizes.d_f > 0 {
        for (gj, x) in g.iter_mut().zip(grad_df_star) {
            *gj -= f * x;
        }
    }
    if sizes.d_k > 0 {
        for ((gj, star), hat) in g.iter_mut().zip(grad_dk_star).zip(grad_dk_hat) {
            *gj += k * (hat - star);
        }
    }
    for gj in g.iter_mut() {
        *gj /= r;
    }
    Ok(g)
}

/// Edge/feature variant: `D_r = D`, and `D_i` takes the role of `D_k`.
pub fn rectify_gradient_single_subset(
    model_star: &ModelState,
    d: usize,
    d_i: usize,
    grad_di_star: &[f64],
    grad_di_hat: &[f64],
) -> Result<Vec<f64>> {
    rectify_gradient(
        model_star,
        RectifySizes {
            d,
            d_f: 0,
            d_k: d_i,
        },
        &[],
        grad_di_star,
        grad_di_hat,
    )
}

/// One step `ω′ = ω̂ − λ g`.
pub fn rectify_update(
    model_hat: &ModelState,
    gradient: &[f64],
    config: &RectifyConfig,
) -> Result<ModelState> {
    config.validate()?;
    if gradient.len() != model_hat.num_params() {
        return Err(EtrError::input(format!(
            "gradient has length {}, model has {} parameters",
            gradient.len(),
            model_hat.num_params()
        )));
    }
    if gradient.iter().any(|g| !g.is_finite()) {
        return Err(EtrError::Numeric("rectify gradient is not finite".into()));
    }
    let params = model_hat
        .params()
        .iter()
        .zip(gradient)
        .map(|(w, g)| w - config.lambda * g)
        .collect();
    model_hat.with_params(params)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FisherSource {
    /// Training-set diagonal stored with the model.
    Snapshot,
    /// Recomputed over the full training set.
    Recomputed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub subsets_s: f64,
    pub fisher_s: f64,
    pub erase_s: f64,
    pub removal_s: f64,
    pub rectify_gradient_s: f64,
    pub update_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSizes {
    pub d: usize,
    pub d_f: usize,
    pub d_k: usize,
    pub d_r: usize,
    pub d_i: usize,
}

/// Machine-readable summary of one unlearning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnReport {
    pub task: TaskKind,
    pub request_size: usize,
    pub sizes: SubsetSizes,
    #[serde(flatten)]
    pub erase: EraseReport,
    pub fisher_source: FisherSource,
    pub rectify_gradient_norm: f64,
    pub erase_config: EraseConfig,
    pub rectify_config: RectifyConfig,
    pub timings: StageTimings,
}

/// Everything produced by [`unlearn_detailed`].
#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    /// Final parameters `ω′`.
    pub model: ModelState,
    /// Parameters after Erase, before Rectify.
    pub erased: ModelState,
    pub edits: Vec<Edit>,
    pub rectify_gradient: Vec<f64>,
    pub subsets: NodeSubsets,
    /// Graph with the request applied.
    pub remaining: GraphBundle,
    pub mapping: NodeMapping,
    pub report: UnlearnReport,
}

pub fn unlearn(
    model: &ModelState,
    graph: &GraphBundle,
    request: &UnlearnRequest,
    erase_cfg: &EraseConfig,
    rectify_cfg: &RectifyConfig,
) -> Result<(ModelState, UnlearnReport)> {
    let out = unlearn_detailed(model, graph, request, erase_cfg, rectify_cfg)?;
    Ok((out.model, out.report))
}

fn mean_gradient_on(graph: &GraphBundle, model: &ModelState, nodes: &[usize]) -> Result<Vec<f64>> {
    if nodes.is_empty() {
        return Ok(Vec::new());
    }
    let input = GcnInput::restricted(graph, nodes)?;
    let trace = forward(&input, model)?;
    backward(&input, &trace, graph.labels(), nodes, model)
}

/// Full pipeline: subsets, Fisher diagonals, Erase, removal, Rectify.
///
/// The training-set terms come from the gradient (and, when present, Fisher)
/// snapshot stored with `model`; everything else reads only nodes within the
/// receptive field of the affected subsets.
pub fn unlearn_detailed(
    model: &ModelState,
    graph: &GraphBundle,
    request: &UnlearnRequest,
    erase_cfg: &EraseConfig,
    rectify_cfg: &RectifyConfig,
) -> Result<UnlearnOutcome> {
    let t_total = Instant::now();
    erase_cfg.validate()?;
    rectify_cfg.validate()?;
    let snapshot = snapshot_of(model)?;
    let n_params = model.num_params();
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let subsets = affected_subgraph(graph, request, erase_cfg.k_hops)?;
    let d = graph.train_mask().iter().filter(|&&b| b).count();
    if model.train_size != 0 && model.train_size != d {
        return Err(EtrError::input(format!(
            "model was trained on {} nodes, graph has {d} training nodes",
            model.train_size
        )));
    }
    timings.subsets_s = t.elapsed().as_secs_f64();

    let task = request.kind();
    let (primary, secondary): (&[usize], &[usize]) = match task {
        TaskKind::Node => (&subsets.d_f, &subsets.d_k),
        TaskKind::Edge | TaskKind::Feature => (&subsets.d_i, &[]),
    };
    let primary_label = match task {
        TaskKind::Node => SubsetLabel::Forget,
        _ => SubsetLabel::Affected,
    };

    // Fisher diagonals and subset gradients at ω* on the original graph
    let t = Instant::now();
    let mode = erase_cfg.fisher_mode;
    let (f_d, fisher_source) = match (&model.fisher_snapshot, mode) {
        (Some(v), FisherMode::PerSample) if v.len() == n_params => (
            FisherDiag {
                subset_label: SubsetLabel::Train,
                subset_size: d,
                values: v.clone(),
            },
            FisherSource::Snapshot,
        ),
        (_, FisherMode::Batch) => (
            FisherDiag {
                subset_label: SubsetLabel::Train,
                subset_size: d,
                values: snapshot.iter().map(|g| g * g).collect(),
            },
            FisherSource::Snapshot,
        ),
        _ => {
            let input = GcnInput::new(graph);
            let trace = forward(&input, model)?;
            let train = graph.train_nodes();
            let s = subset_stats(
                &input,
                &trace,
                graph.labels(),
                model,
                &train,
                SubsetLabel::Train,
                mode,
            )?;
            (s.fisher, FisherSource::Recomputed)
        }
    };
    let (stats_p, stats_s) = if primary.is_empty() {
        (None, None)
    } else {
        let mut targets: Vec<usize> = primary.iter().chain(secondary).copied().collect();
        targets.sort_unstable();
        let input = GcnInput::restricted(graph, &targets)?;
        let trace = forward(&input, model)?;
        let labels = graph.labels();
        let sp = subset_stats(&input, &trace, labels, model, primary, primary_label, mode)?;
        let ss = if secondary.is_empty() {
            None
        } else {
            Some(subset_stats(
                &input,
                &trace,
                labels,
                model,
                secondary,
                SubsetLabel::Neighborhood,
                mode,
            )?)
        };
        (Some(sp), ss)
    };
    timings.fisher_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let f_p = stats_p
        .as_ref()
        .map(|s| s.fisher.clone())
        .unwrap_or_else(|| FisherDiag::empty(n_params, primary_label));
    let f_s = stats_s
        .as_ref()
        .map(|s| s.fisher.clone())
        .unwrap_or_else(|| FisherDiag::empty(n_params, SubsetLabel::Neighborhood));
    let erased = erase(model, &f_d, &f_p, &f_s, erase_cfg)?;
    timings.erase_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let (remaining, mapping) = remove_request(graph, request)?;
    timings.removal_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let empty: Vec<f64> = Vec::new();
    let grad_p = stats_p.as_ref().map_or(&empty, |s| &s.mean_gradient);
    let grad = match task {
        TaskKind::Node => {
            let grad_k = stats_s.as_ref().map_or(&empty, |s| &s.mean_gradient);
            let dk_new = mapping.map_ids(&subsets.d_k);
            let grad_k_hat = mean_gradient_on(&remaining, &erased.model, &dk_new)?;
            let sizes = RectifySizes {
                d,
                d_f: subsets.d_f.len(),
                d_k: subsets.d_k.len(),
            };
            rectify_gradient(model, sizes, grad_p, grad_k, &grad_k_hat)?
        }
        TaskKind::Edge | TaskKind::Feature => {
            let grad_hat = mean_gradient_on(&remaining, &erased.model, &subsets.d_i)?;
            rectify_gradient_single_subset(model, d, subsets.d_i.len(), grad_p, &grad_hat)?
        }
    };
    timings.rectify_gradient_s = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut out = rectify_update(&erased.model, &grad, rectify_cfg)?;
    out.train_size = d - subsets.d_f.len();
    timings.update_s = t.elapsed().as_secs_f64();
    timings.total_s = t_total.elapsed().as_secs_f64();

    let report = UnlearnReport {
        task,
        request_size: request.len(),
        sizes: SubsetSizes {
            d,
            d_f: subsets.d_f.len(),
            d_k: subsets.d_k.len(),
            d_r: subsets.d_r.len(),
            d_i: subsets.d_i.len(),
        },
        erase: erased.report.clone(),
        fisher_source,
        rectify_gradient_norm: crate::linalg::norm2(&grad),
        erase_config: erase_cfg.clone(),
        rectify_config: rectify_cfg.clone(),
        timings,
    };
    Ok(UnlearnOutcome {
        model: out,
        erased: erased.model,
        edits: erased.edits,
        rectify_gradient: grad,
        subsets,
        remaining,
        mapping,
        report,
    })
}

impl UnlearnOutcome {
    /// Mean gradient over `D_r` at the erased parameters, computed directly
    /// on the whole remaining graph. Diagnostic only: it reads every node.
    pub fn direct_remaining_gradient(&self) -> Result<Vec<f64>> {
        let d_r = self.mapping.map_ids(&self.subsets.d_r);
        let input = GcnInput::new(&self.remaining);
        let trace = forward(&input, &self.erased)?;
        backward(&input, &trace, self.remaining.labels(), &d_r, &self.erased)
    }
}

/// Quantities from the masking bound, evaluated on concrete models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundAudit {
    /// Mean squared gap between the retrained and the masked parameters.
    pub q: f64,
    pub rhs: f64,
    pub holds: bool,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub critical_ratio: f64,
    pub mask_size: usize,
    pub num_params: usize,
    pub d: usize,
    pub d_f: usize,
    pub d_r: usize,
}

/// Evaluates the masking bound for `mask_set`. `f_d`, `f_df` and `f_dr` are
/// taken at ω*; zero Fisher entries are floored at [`RATIO_EPS`].
pub fn bound_audit(
    model_star: &ModelState,
    model_retrained: Option<&ModelState>,
    f_d: &FisherDiag,
    f_df: &FisherDiag,
    f_dr: &FisherDiag,
    mask_set: &[usize],
) -> Result<BoundAudit> {
    let retrained = model_retrained
        .ok_or_else(|| EtrError::State("bound audit needs the retrained model".into()))?;
    if !model_star.same_shape(retrained) {
        return Err(EtrError::input("retrained model differs in shape"));
    }
    check_lengths(model_star, &[f_d, f_df, f_dr])?;
    let masked = mask_baseline(model_star, mask_set)?;
    let n = model_star.num_params();
    let w = model_star.params();
    let wr = retrained.params();
    let q = wr
        .iter()
        .zip(masked.params())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n as f64;

    let d = f_d.subset_size;
    let (df, dr) = (f_df.subset_size, f_dr.subset_size);
    if d == 0 {
        return Err(EtrError::input("training set is empty"));
    }
    let (pf, pr) = (df as f64 / d as f64, dr as f64 / d as f64);
    let floor = |x: f64| x.max(RATIO_EPS);
    let mut c1 = 0.0f64;
    let mut c2 = 0.0f64;
    let mut c3 = 0.0;
    for j in 0..n {
        let fd = floor(f_d.values[j]);
        let b = f_d.values[j] * w[j];
        let br = f_dr.values[j] * wr[j];
        c1 = c1.max(br * br);
        c2 = c2.max((br * pf) * (br * pf));
        let gap = b - br * pr;
        c3 += gap * gap * 2.0 / (fd * fd);
    }
    let mut in_mask = vec![false; n];
    for &j in mask_set {
        in_mask[j] = true;
    }
    let mut s_in = 0.0;
    let mut s_out = 0.0;
    for j in 0..n {
        let fr = floor(f_dr.values[j]);
        if in_mask[j] {
            s_in += 1.0 / (fr * fr);
        } else {
            let fd = floor(f_d.values[j]);
            let ff = f_df.values[j];
            s_out += ff * ff / (fd * fd * fr * fr);
        }
    }
    let rhs = (c1 * s_in + c2 * s_out + c3) / n as f64;
    let critical_ratio = if c2 > 0.0 {
        (c1 / c2).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(BoundAudit {
        q,
        rhs,
        holds: q <= rhs,
        c1,
        c2,
        c3,
        critical_ratio,
        mask_size: in_mask.iter().filter(|&&b| b).count(),
        num_params: n,
        d,
        d_f: df,
        d_r: dr,
    })
}
