//! Two-layer GCN: `H1 = relu(P X W0)`, `H2 = P H1 W1`, `Z = softmax(H2)`.
//!
//! Gradients are the closed-form backpropagation of the mean cross-entropy,
//! flattened as `ω = concat(vec(W0), vec(W1))` with both matrices row-major.
//! `P X` is precomputed once per graph (it does not depend on the weights),
//! optionally only for the rows a computation actually needs.

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{EtrError, Result};
use crate::graph::{ball_mask, build_propagation, GraphBundle, PropagationMatrix};
use crate::linalg::{axpy, dot, madd, CsrMatrix, Matrix};

/// Probabilities are floored at this value before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// GCN weights plus the state stored at the end of training.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    feature_dim: usize,
    hidden_dim: usize,
    num_classes: usize,
    params: Vec<f64>,
    /// Gradient of the training loss at the final parameters.
    pub grad_snapshot: Option<Vec<f64>>,
    /// Per-sample empirical Fisher diagonal over the training set at the final parameters.
    pub fisher_snapshot: Option<Vec<f64>>,
    pub train_size: usize,
}

impl ModelState {
    pub fn zeros(feature_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self::from_params(
            feature_dim,
            hidden_dim,
            num_classes,
            vec![0.0; feature_dim * hidden_dim + hidden_dim * num_classes],
        )
        .expect("sizes agree")
    }

    pub fn from_params(
        feature_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        params: Vec<f64>,
    ) -> Result<Self> {
        let expected = feature_dim * hidden_dim + hidden_dim * num_classes;
        if params.len() != expected {
            return Err(EtrError::input(format!(
                "parameter vector has length {}, expected d*h + h*C = {expected}",
                params.len()
            )));
        }
        Ok(Self {
            feature_dim,
            hidden_dim,
            num_classes,
            params,
            grad_snapshot: None,
            fisher_snapshot: None,
            train_size: 0,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Flattened parameter vector ω.
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `W0` (d × h), row-major.
    pub fn w0(&self) -> &[f64] {
        &self.params[..self.feature_dim * self.hidden_dim]
    }

    /// `W1` (h × C), row-major.
    pub fn w1(&self) -> &[f64] {
        &self.params[self.feature_dim * self.hidden_dim..]
    }

    /// Same architecture, new parameters, no stored snapshots.
    pub fn with_params(&self, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::from_params(self.feature_dim, self.hidden_dim, self.num_classes, params)?;
        m.train_size = self.train_size;
        Ok(m)
    }

    pub fn same_shape(&self, other: &ModelState) -> bool {
        self.feature_dim == other.feature_dim
            && self.hidden_dim == other.hidden_dim
            && self.num_classes == other.num_classes
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelJson::from(self)).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: ModelJson =
            serde_json::from_str(text).map_err(|e| EtrError::input(format!("model JSON: {e}")))?;
        raw.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    d: usize,
    h: usize,
    #[serde(rename = "C")]
    c: usize,
    w0: Vec<f64>,
    w1: Vec<f64>,
    grad_snapshot: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fisher_diag: Option<Vec<f64>>,
    train_size: usize,
}

impl From<&ModelState> for ModelJson {
    fn from(m: &ModelState) -> Self {
        ModelJson {
            d: m.feature_dim,
            h: m.hidden_dim,
            c: m.num_classes,
            w0: m.w0().to_vec(),
            w1: m.w1().to_vec(),
            grad_snapshot: m.grad_snapshot.clone(),
            fisher_diag: m.fisher_snapshot.clone(),
            train_size: m.train_size,
        }
    }
}

impl TryFrom<ModelJson> for ModelState {
    type Error = EtrError;

    fn try_from(raw: ModelJson) -> Result<Self> {
        if raw.w0.len() != raw.d * raw.h || raw.w1.len() != raw.h * raw.c {
            return Err(EtrError::input(format!(
                "model JSON: w0/w1 lengths {}/{} do not match d={} h={} C={}",
                raw.w0.len(),
                raw.w1.len(),
                raw.d,
                raw.h,
                raw.c
            )));
        }
        let mut params = raw.w0;
        params.extend(raw.w1);
        let mut m = ModelState::from_params(raw.d, raw.h, raw.c, params)?;
        for (name, v) in [
            ("grad_snapshot", &raw.grad_snapshot),
            ("fisher_diag", &raw.fisher_diag),
        ] {
            if let Some(v) = v {
                if v.len() != m.num_params() {
                    return Err(EtrError::input(format!(
                        "model JSON: {name} has length {}, expected {}",
                        v.len(),
                        m.num_params()
                    )));
                }
            }
        }
        m.grad_snapshot = raw.grad_snapshot;
        m.fisher_snapshot = raw.fisher_diag;
        m.train_size = raw.train_size;
        Ok(m)
    }
}

/// Propagation operator plus the propagated features `P X`.
#[derive(Debug, Clone)]
pub struct GcnInput {
    prop: PropagationMatrix,
    px: CsrMatrix,
}

impl GcnInput {
    /// Full input for every node of `graph`.
    pub fn new(graph: &GraphBundle) -> Self {
        Self::from_parts(build_propagation(graph), graph.features())
    }

    pub fn from_parts(prop: PropagationMatrix, features: &Matrix) -> Self {
        assert_eq!(
            prop.num_nodes(),
            features.rows(),
            "P and X disagree on node count"
        );
        let want = vec![true; prop.num_nodes()];
        let px = propagate_rows(&prop, features, &want);
        Self { prop, px }
    }

    /// Input sufficient for outputs and gradients at `targets` only.
    ///
    /// `P X` is formed for the targets and their neighbors, so only feature
    /// rows within two hops of a target are read. Outputs at other nodes are
    /// not meaningful.
    pub fn restricted(graph: &GraphBundle, targets: &[usize]) -> Result<Self> {
        let prop = build_propagation(graph);
        let want = ball_mask(graph, targets, 1)?;
        let px = propagate_rows(&prop, graph.features(), &want);
        Ok(Self { prop, px })
    }

    pub fn propagation(&self) -> &PropagationMatrix {
        &self.prop
    }

    pub fn propagated_features(&self) -> &CsrMatrix {
        &self.px
    }

    pub fn num_nodes(&self) -> usize {
        self.prop.num_nodes()
    }

    pub fn feature_dim(&self) -> usize {
        self.px.cols()
    }

    fn check_model(&self, model: &ModelState) -> Result<()> {
        if model.feature_dim() != self.feature_dim() {
            return Err(EtrError::input(format!(
                "model expects {} features, graph has {}",
                model.feature_dim(),
                self.feature_dim()
            )));
        }
        Ok(())
    }
}

/// Rows of `P X` for which `want` is set, reading only the needed rows of `X`.
fn propagate_rows(prop: &PropagationMatrix, x: &Matrix, want: &[bool]) -> CsrMatrix {
    let d = x.cols();
    // nonzero pattern of each X row, gathered on first use
    let mut sparse_x: Vec<Option<Vec<(usize, f64)>>> = vec![None; x.rows()];
    let mut acc = vec![0.0; d];
    let mut hit = vec![false; d];
    let mut touched = Vec::new();
    let mut indptr = Vec::with_capacity(want.len() + 1);
    let mut indices = Vec::new();
    let mut values = Vec::new();
    indptr.push(0);
    for (i, &w) in want.iter().enumerate() {
        if w {
            let (cols, vals) = prop.row(i);
            for (&j, &p) in cols.iter().zip(vals) {
                let xj = sparse_x[j].get_or_insert_with(|| {
                    x.row(j)
                        .iter()
                        .enumerate()
                        .filter(|(_, v)| **v != 0.0)
                        .map(|(c, &v)| (c, v))
                        .collect()
                });
                for &(c, v) in xj.iter() {
                    if !hit[c] {
                        hit[c] = true;
                        touched.push(c);
                    }
                    acc[c] += p * v;
                }
            }
            touched.sort_unstable();
            for &c in &touched {
                if acc[c] != 0.0 {
                    indices.push(c);
                    values.push(acc[c]);
                }
                acc[c] = 0.0;
                hit[c] = false;
            }
            touched.clear();
        }
        indptr.push(indices.len());
    }
    CsrMatrix::from_parts(want.len(), d, indptr, indices, values)
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `P X W0`, before the activation.
    pub pre: Matrix,
    /// `relu(P X W0)`.
    pub h1: Matrix,
    /// Logits `P H1 W1`.
    pub h2: Matrix,
    /// Row-wise softmax of `h2`.
    pub z: Matrix,
}

/// Numerically stable row softmax.
pub fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

pub fn forward(input: &GcnInput, model: &ModelState) -> Result<ForwardTrace> {
    input.check_model(model)?;
    let n = input.num_nodes();
    let (h, c) = (model.hidden_dim(), model.num_classes());
    let w0 = model.w0();
    let w1 = model.w1();

    let mut pre = Matrix::zeros(n, h);
    for i in 0..n {
        let (cols, vals) = input.px.row(i);
        let row = pre.row_mut(i);
        for (&r, &v) in cols.iter().zip(vals) {
            axpy(v, &w0[r * h..(r + 1) * h], row);
        }
    }
    let mut h1 = pre.clone();
    for v in h1.as_mut_slice() {
        // NaN passes through so divergence stays visible
        if *v < 0.0 {
            *v = 0.0;
        }
    }

    // T = H1 W1, skipping inactive rows
    let mut t = Matrix::zeros(n, c);
    for i in 0..n {
        let hrow = h1.row(i);
        if hrow.iter().all(|&v| v == 0.0) {
            continue;
        }
        let trow = t.row_mut(i);
        for (k, &hv) in hrow.iter().enumerate() {
            if hv != 0.0 {
                axpy(hv, &w1[k * c..(k + 1) * c], trow);
            }
        }
    }

    let mut h2 = Matrix::zeros(n, c);
    let mut z = Matrix::zeros(n, c);
    for i in 0..n {
        let (cols, vals) = input.prop.row(i);
        let row = h2.row_mut(i);
        for (&j, &p) in cols.iter().zip(vals) {
            axpy(p, t.row(j), row);
        }
        softmax_row(h2.row(i), z.row_mut(i));
    }
    Ok(ForwardTrace { pre, h1, h2, z })
}

fn check_mask(mask: &[usize], n: usize) -> Result<()> {
    if mask.is_empty() {
        return Err(EtrError::input("loss mask is empty"));
    }
    if let Some(&u) = mask.iter().find(|&&u| u >= n) {
        return Err(EtrError::input(format!(
            "mask node {u} out of range for {n} nodes"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class over `mask`.
pub fn loss(trace: &ForwardTrace, labels: &[usize], mask: &[usize]) -> Result<f64> {
    check_mask(mask, trace.z.rows())?;
    let total: f64 = mask
        .iter()
        .map(|&i| -trace.z.get(i, labels[i]).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / mask.len() as f64)
}

fn check_trace(input: &GcnInput, trace: &ForwardTrace, model: &ModelState) -> Result<()> {
    input.check_model(model)?;
    let n = input.num_nodes();
    if trace.z.rows() != n
        || trace.z.cols() != model.num_classes()
        || trace.pre.rows() != n
        || trace.pre.cols() != model.hidden_dim()
    {
        return Err(EtrError::input(
            "forward trace does not match the graph/model (stale trace?)",
        ));
    }
    Ok(())
}

/// Gradient of [`loss`] over `mask` with respect to ω.
pub fn backward(
    input: &GcnInput,
    trace: &ForwardTrace,
    labels: &[usize],
    mask: &[usize],
    model: &ModelState,
) -> Result<Vec<f64>> {
    check_trace(input, trace, model)?;
    check_mask(mask, input.num_nodes())?;
    let n = input.num_nodes();
    let (d, h, c) = (model.feature_dim(), model.hidden_dim(), model.num_classes());
    let w1 = model.w1();
    let scale = 1.0 / mask.len() as f64;

    // Pᵀ (Z - Y), restricted to the rows it touches
    let mut pg = Matrix::zeros(n, c);
    let mut touched = vec![false; n];
    let mut rows = Vec::new();
    let mut delta = vec![0.0; c];
    for &i in mask {
        delta.copy_from_slice(trace.z.row(i));
        delta[labels[i]] -= 1.0;
        let (cols, vals) = input.prop.row(i);
        for (&j, &p) in cols.iter().zip(vals) {
            if !touched[j] {
                touched[j] = true;
                rows.push(j);
            }
            axpy(p * scale, &delta, pg.row_mut(j));
        }
    }
    rows.sort_unstable();

    let mut grad = vec![0.0; d * h + h * c];
    let (g0, g1) = grad.split_at_mut(d * h);
    let mut dpre = vec![0.0; h];
    for &j in &rows {
        let pgj = pg.row(j);
        let h1j = trace.h1.row(j);
        for (k, &hv) in h1j.iter().enumerate() {
            if hv != 0.0 {
                axpy(hv, pgj, &mut g1[k * c..(k + 1) * c]);
            }
        }
        let prej = trace.pre.row(j);
        let mut any = false;
        for k in 0..h {
            dpre[k] = if prej[k] > 0.0 {
                any = true;
                dot(&w1[k * c..(k + 1) * c], pgj)
            } else {
                0.0
            };
        }
        if !any {
            continue;
        }
        let (cols, vals) = input.px.row(j);
        for (&r, &v) in cols.iter().zip(vals) {
            axpy(v, &dpre, &mut g0[r * h..(r + 1) * h]);
        }
    }
    Ok(grad)
}

/// Sparse `W0` gradient of one node, bucketed by feature row.
#[derive(Default)]
pub(crate) struct NodeTerms {
    /// Masked `p_ij * back` per contributing neighbor, `h` values each.
    scaled: Vec<f64>,
    /// Feature rows touched, in first-touch order, and their bucket starts.
    rows: Vec<usize>,
    starts: Vec<usize>,
    /// `(neighbor slot, PX value)` grouped by row.
    items: Vec<(usize, f64)>,
}

impl NodeTerms {
    /// Adds the elementwise square of the `W0` gradient to `acc` (`d × h`,
    /// row-major). `row` is scratch of length `h`.
    #[inline(always)]
    fn add_w0_squares_with<const FMA: bool>(&self, acc: &mut [f64], h: usize, row: &mut [f64]) {
        let lane = |slot: usize| slot * h..(slot + 1) * h;
        for (b, &r) in self.rows.iter().enumerate() {
            let group = &self.items[self.starts[b]..self.starts[b + 1]];
            let (last, rest) = group.split_last().expect("bucket is nonempty");
            let dst = &mut acc[r * h..(r + 1) * h];
            let (slot, x) = *last;
            let ws = &self.scaled[lane(slot)];
            if rest.is_empty() {
                for (q, &wk) in dst.iter_mut().zip(ws) {
                    let v = x * wk;
                    *q = madd::<FMA>(v, v, *q);
                }
                continue;
            }
            let (s0, x0) = rest[0];
            for (v, &wk) in row.iter_mut().zip(&self.scaled[lane(s0)]) {
                *v = x0 * wk;
            }
            for &(s1, x1) in &rest[1..] {
                for (v, &wk) in row.iter_mut().zip(&self.scaled[lane(s1)]) {
                    *v = madd::<FMA>(x1, wk, *v);
                }
            }
            for ((q, &acc_v), &wk) in dst.iter_mut().zip(row.iter()).zip(ws) {
                let v = madd::<FMA>(x, wk, acc_v);
                *q = madd::<FMA>(v, v, *q);
            }
        }
    }

    fn add_w0_squares(&self, acc: &mut [f64], h: usize, row: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if crate::linalg::fma_available() {
            // SAFETY: the CPU supports AVX2 and FMA
            unsafe { self.add_w0_squares_fma(acc, h, row) };
            return;
        }
        self.add_w0_squares_with::<false>(acc, h, row);
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn add_w0_squares_fma(&self, acc: &mut [f64], h: usize, row: &mut [f64]) {
        self.add_w0_squares_with::<true>(acc, h, row);
    }
}

/// Scratch space for per-node gradients. Contributions to the `W0` block
/// are bucketed by feature row so each row is assembled in a small buffer.
pub(crate) struct NodeGradWorkspace {
    h: usize,
    c: usize,
    g1: Vec<f64>,
    delta: Vec<f64>,
    agg: Vec<f64>,
    back: Vec<f64>,
    /// Per feature row: bucket size while counting, then write cursor.
    count: Vec<usize>,
    terms: NodeTerms,
    row: Vec<f64>,
}

impl NodeGradWorkspace {
    pub(crate) fn new(model: &ModelState) -> Self {
        let (d, h, c) = (model.feature_dim(), model.hidden_dim(), model.num_classes());
        Self {
            h,
            c,
            g1: vec![0.0; h * c],
            delta: vec![0.0; c],
            agg: vec![0.0; h],
            back: vec![0.0; h],
            count: vec![0; d],
            terms: NodeTerms::default(),
            row: vec![0.0; h],
        }
    }

    /// Prepares the gradient of `-log Z[node][y]`.
    pub(crate) fn compute(
        &mut self,
        input: &GcnInput,
        trace: &ForwardTrace,
        labels: &[usize],
        model: &ModelState,
        node: usize,
    ) {
        let (h, c) = (self.h, self.c);
        let w1 = model.w1();
        self.delta.copy_from_slice(trace.z.row(node));
        self.delta[labels[node]] -= 1.0;

        let (cols, vals) = input.prop.row(node);
        self.agg.fill(0.0);
        for (&j, &p) in cols.iter().zip(vals) {
            axpy(p, trace.h1.row(j), &mut self.agg);
        }
        for k in 0..h {
            let a = self.agg[k];
            let dst = &mut self.g1[k * c..(k + 1) * c];
            for (g, &dz) in dst.iter_mut().zip(&self.delta) {
                *g = a * dz;
            }
            self.back[k] = dot(&w1[k * c..(k + 1) * c], &self.delta);
        }

        // counting sort of (row, slot) pairs; slots stay in neighbor order
        let t = &mut self.terms;
        t.scaled.clear();
        t.rows.clear();
        let mut total = 0;
        let mut slots = 0;
        for (&j, &p) in cols.iter().zip(vals) {
            let prej = trace.pre.row(j);
            if prej.iter().all(|&v| !(v > 0.0)) {
                continue;
            }
            slots += 1;
            t.scaled.extend(
                prej.iter()
                    .zip(&self.back)
                    .map(|(&z, &b)| if z > 0.0 { p * b } else { 0.0 }),
            );
            for &r in input.px.row(j).0 {
                if self.count[r] == 0 {
                    t.rows.push(r);
                }
                self.count[r] += 1;
                total += 1;
            }
        }
        t.starts.clear();
        let mut at = 0;
        for &r in &t.rows {
            t.starts.push(at);
            let n = self.count[r];
            self.count[r] = at;
            at += n;
        }
        t.starts.push(at);
        t.items.clear();
        t.items.resize(total, (0, 0.0));
        let mut slot = 0;
        for &j in cols {
            let prej = trace.pre.row(j);
            if prej.iter().all(|&v| !(v > 0.0)) {
                continue;
            }
            let (pcols, pvals) = input.px.row(j);
            for (&r, &x) in pcols.iter().zip(pvals) {
                t.items[self.count[r]] = (slot, x);
                self.count[r] += 1;
            }
            slot += 1;
        }
        debug_assert_eq!(slot, slots);
        for &r in &t.rows {
            self.count[r] = 0;
        }
    }

    /// Calls `f(r, row)` for every feature row `r` whose `W0` gradient may be
    /// nonzero; `row` holds `∂/∂W0[r, :]`.
    pub(crate) fn for_each_w0_row(&mut self, mut f: impl FnMut(usize, &[f64])) {
        let h = self.h;
        let t = &self.terms;
        for (b, &r) in t.rows.iter().enumerate() {
            let group = &t.items[t.starts[b]..t.starts[b + 1]];
            let (slot, x) = group[0];
            for (v, &w) in self.row.iter_mut().zip(&t.scaled[slot * h..(slot + 1) * h]) {
                *v = x * w;
            }
            for &(slot, x) in &group[1..] {
                axpy(x, &t.scaled[slot * h..(slot + 1) * h], &mut self.row);
            }
            f(r, &self.row);
        }
    }

    /// Adds the elementwise square of the `W0` gradient to `acc` (`d × h`).
    pub(crate) fn add_w0_squares(&mut self, acc: &mut [f64]) {
        self.terms.add_w0_squares(acc, self.h, &mut self.row);
    }

    /// `∂/∂W1`, row-major.
    pub(crate) fn w1_grad(&self) -> &[f64] {
        &self.g1
    }
}

fn check_node(input: &GcnInput, node: usize, labels: &[usize]) -> Result<()> {
    if node >= input.num_nodes() || node >= labels.len() {
        return Err(EtrError::input(format!(
            "node {node} has no label (graph has {} nodes)",
            input.num_nodes()
        )));
    }
    Ok(())
}

/// Gradient of `-log Z[node][y_node]` with respect to ω (no `1/|D|` factor).
pub fn per_node_gradient(
    input: &GcnInput,
    trace: &ForwardTrace,
    labels: &[usize],
    model: &ModelState,
    node: usize,
) -> Result<Vec<f64>> {
    check_trace(input, trace, model)?;
    check_node(input, node, labels)?;
    let mut ws = NodeGradWorkspace::new(model);
    ws.compute(input, trace, labels, model, node);
    let h = model.hidden_dim();
    let mut g = vec![0.0; model.num_params()];
    let (g0, g1) = g.split_at_mut(model.feature_dim() * h);
    ws.for_each_w0_row(|r, row| g0[r * h..(r + 1) * h].copy_from_slice(row));
    g1.copy_from_slice(ws.w1_grad());
    Ok(g)
}

/// Sum over `nodes` of the elementwise squared per-node gradient.
pub(crate) fn node_gradient_sq_sum(
    input: &GcnInput,
    trace: &ForwardTrace,
    labels: &[usize],
    model: &ModelState,
    nodes: &[usize],
) -> Result<Vec<f64>> {
    check_trace(input, trace, model)?;
    for &u in nodes {
        check_node(input, u, labels)?;
    }
    let d = model.feature_dim();
    let h = model.hidden_dim();
    let mut sum_sq = vec![0.0; model.num_params()];
    let (sq0, sq1) = sum_sq.split_at_mut(d * h);
    let mut ws = NodeGradWorkspace::new(model);
    for &u in nodes {
        ws.compute(input, trace, labels, model, u);
        ws.add_w0_squares(sq0);
        add_squares(ws.w1_grad(), sq1);
    }
    Ok(sum_sq)
}

fn add_squares(g: &[f64], acc: &mut [f64]) {
    for (q, &v) in acc.iter_mut().zip(g) {
        *q += v * v;
    }
}

/// Class with the largest probability per row; ties go to the smallest id.
pub fn predict_from_trace(trace: &ForwardTrace) -> Vec<usize> {
    (0..trace.z.rows())
        .map(|i| {
            let row = trace.z.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn predict(graph: &GraphBundle, model: &ModelState) -> Result<Vec<usize>> {
    let trace = forward(&GcnInput::new(graph), model)?;
    Ok(predict_from_trace(&trace))
}

/// Hyperparameters for full-batch gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden_dim: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Multiplier on the Glorot-uniform bound.
    pub init_scale: f64,
    /// Also store the training-set Fisher diagonal at the final parameters.
    pub store_fisher: bool,
    /// Skip the learning-rate / weight-decay range checks.
    pub force: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            epochs: 100,
            learning_rate: 1.0,
            weight_decay: 5e-5,
            seed: 0,
            init_scale: 1.0,
            store_fisher: true,
            force: false,
        }
    }
}

impl TrainConfig {
    pub const LR_RANGE: (f64, f64) = (1e-4, 5.0);
    pub const WEIGHT_DECAY_RANGE: (f64, f64) = (0.0, 1e-2);

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(EtrError::input("hidden_dim must be positive"));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(EtrError::input("init_scale must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EtrError::input("learning_rate must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(EtrError::input("weight_decay must be nonnegative"));
        }
        if self.force {
            return Ok(());
        }
        let (lo, hi) = Self::LR_RANGE;
        if !(lo..=hi).contains(&self.learning_rate) {
            return Err(EtrError::input(format!(
                "learning_rate {} outside [{lo}, {hi}] (use force to override)",
                self.learning_rate
            )));
        }
        let (lo, hi) = Self::WEIGHT_DECAY_RANGE;
        if !(lo..=hi).contains(&self.weight_decay) {
            return Err(EtrError::input(format!(
                "weight_decay {} outside [{lo}, {hi}] (use force to override)",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Result of [`train_logged`]: the model and the loss before each update.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub losses: Vec<f64>,
}

pub fn glorot_init(feature_dim: usize, num_classes: usize, config: &TrainConfig) -> ModelState {
    let h = config.hidden_dim;
    let mut rng = Pcg64::seed_from_u64(config.seed);
    let b0 = config.init_scale * (6.0 / (feature_dim + h) as f64).sqrt();
    let b1 = config.init_scale * (6.0 / (h + num_classes) as f64).sqrt();
    let mut params = Vec::with_capacity(feature_dim * h + h * num_classes);
    params.extend((0..feature_dim * h).map(|_| rng.random_range(-b0..b0)));
    params.extend((0..h * num_classes).map(|_| rng.random_range(-b1..b1)));
    ModelState::from_params(feature_dim, h, num_classes, params).expect("sizes agree")
}

pub fn train(graph: &GraphBundle, config: &TrainConfig) -> Result<ModelState> {
    Ok(train_logged(graph, config)?.model)
}

/// Full-batch gradient descent with weight decay on the training split.
pub fn train_logged(graph: &GraphBundle, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mask = graph.train_nodes();
    if mask.is_empty() {
        return Err(EtrError::input("graph has no training nodes"));
    }
    let input = GcnInput::new(graph);
    let labels = graph.labels();
    let mut model = glorot_init(graph.feature_dim(), graph.num_classes(), config);
    let (lr, wd) = (config.learning_rate, config.weight_decay);

    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let trace = forward(&input, &model)?;
        let l = loss(&trace, labels, &mask)?;
        if !l.is_finite() {
            return Err(EtrError::Divergence { epoch, loss: l });
        }
        losses.push(l);
        let g = backward(&input, &trace, labels, &mask, &model)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(EtrError::Divergence {
                epoch,
                loss: f64::NAN,
            });
        }
        for (w, gj) in model.params_mut().iter_mut().zip(&g) {
            *w -= lr * (gj + wd * *w);
        }
    }

    let trace = forward(&input, &model)?;
    let final_loss = loss(&trace, labels, &mask)?;
    if !final_loss.is_finite() {
        return Err(EtrError::Divergence {
            epoch: config.epochs,
            loss: final_loss,
        });
    }
    let snapshot = backward(&input, &trace, labels, &mask, &model)?;
    if config.store_fisher {
        let sum_sq = node_gradient_sq_sum(&input, &trace, labels, &model, &mask)?;
        let k = mask.len() as f64;
        model.fisher_snapshot = Some(sum_sq.into_iter().map(|s| s / k).collect());
    }
    model.grad_snapshot = Some(snapshot);
    model.train_size = mask.len();
    Ok(TrainOutcome { model, losses })
}
