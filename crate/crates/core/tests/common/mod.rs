#![allow(dead_code)]

use etr::gnn::{backward, forward, GcnInput, ModelState};
use etr::linalg::Matrix;
use etr::{generate_sbm, GraphBundle, SbmParams};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;

/// Erdős–Rényi graph with uniform features in `[-1, 1]`, random labels and
/// a random split that keeps at least two training nodes.
pub fn random_graph(n: usize, p: f64, d: usize, c: usize, seed: u64) -> GraphBundle {
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if rng.random_bool(p) {
                edges.push((u, v));
            }
        }
    }
    let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let mut train: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    train[0] = true;
    train[n - 1] = true;
    let test = train.iter().map(|t| !t).collect();
    GraphBundle::new(&edges, Matrix::from_vec(n, d, x), labels, train, test, c).unwrap()
}

pub fn random_model(d: usize, h: usize, c: usize, scale: f64, seed: u64) -> ModelState {
    let mut rng = Pcg64::seed_from_u64(seed);
    let n = d * h + h * c;
    let params = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    ModelState::from_params(d, h, c, params).unwrap()
}

/// `model` with its training gradient recorded as if training had just ended.
pub fn with_snapshot(graph: &GraphBundle, mut model: ModelState) -> ModelState {
    let input = GcnInput::new(graph);
    let trace = forward(&input, &model).unwrap();
    let train = graph.train_nodes();
    model.grad_snapshot = Some(backward(&input, &trace, graph.labels(), &train, &model).unwrap());
    model.train_size = train.len();
    model
}

pub fn sbm(n: usize, c: usize, seed: u64) -> GraphBundle {
    generate_sbm(&SbmParams {
        num_nodes: n,
        num_classes: c,
        p_in: 0.1,
        p_out: 0.01,
        feature_dim: 8.max(c),
        seed,
    })
    .unwrap()
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Gradient of the mean loss over `mask` by central differences.
pub fn finite_difference(
    graph: &GraphBundle,
    model: &ModelState,
    mask: &[usize],
    step: f64,
) -> Vec<f64> {
    let input = GcnInput::new(graph);
    let eval = |params: Vec<f64>| {
        let m = model.with_params(params).unwrap();
        etr::loss(&forward(&input, &m).unwrap(), graph.labels(), mask).unwrap()
    };
    (0..model.num_params())
        .map(|j| {
            let mut plus = model.params().to_vec();
            let mut minus = plus.clone();
            plus[j] += step;
            minus[j] -= step;
            (eval(plus) - eval(minus)) / (2.0 * step)
        })
        .collect()
}

/// Smallest `|P X W0|` entry; instances close to a ReLU kink are skipped.
pub fn kink_margin(graph: &GraphBundle, model: &ModelState) -> f64 {
    let trace = forward(&GcnInput::new(graph), model).unwrap();
    trace
        .pre
        .as_slice()
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

/// Per-coordinate relative error, `|a - b| / max(|a|, |b|, floor)`.
pub fn coord_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Random Fisher diagonals plus parameters, as drawn for the Erase invariants.
pub type EraseCase = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

pub fn erase_case_strategy(n: usize) -> impl proptest::strategy::Strategy<Value = EraseCase> {
    use proptest::prelude::*;
    let v = move || prop::collection::vec(prop_oneof![1 => Just(0.0), 6 => 1e-6f64..10.0], n);
    (
        prop::collection::vec(1e-3f64..10.0, n),
        v(),
        v(),
        prop::collection::vec(prop_oneof![1 => Just(0.0), 8 => -5.0f64..5.0], n),
    )
}

/// Checks disjointness, shrinkage, identity at `m = 0` and `D_f = ∅`, and
/// monotone edit count for one case.
pub fn check_erase_case(case: &EraseCase, m: u32, dk_empty: bool) -> Result<(), String> {
    use etr::fisher::{FisherDiag, SubsetLabel};
    use etr::unlearn::{erase, erase_single_subset, Edit};
    use etr::EraseConfig;

    let (fd, ff, fk, w) = case.clone();
    let n = w.len();
    let model = ModelState::from_params(1, n / 2, 1, w).unwrap();
    let diag = |label, size, values| FisherDiag {
        subset_label: label,
        subset_size: size,
        values,
    };
    let f_d = diag(SubsetLabel::Train, 100, fd);
    let f_f = diag(SubsetLabel::Forget, 3, ff);
    let f_k = if dk_empty {
        FisherDiag::empty(n, SubsetLabel::Neighborhood)
    } else {
        diag(SubsetLabel::Neighborhood, 7, fk)
    };
    let cfg = |m| EraseConfig {
        m_permille: m,
        ..EraseConfig::default()
    };
    let err = |s: String| Err::<(), String>(s);

    let out = erase(&model, &f_d, &f_f, &f_k, &cfg(m)).map_err(|e| e.to_string())?;
    let r = &out.report;
    if dk_empty && r.branch2_count != 0 {
        return err("branch 2 ran with empty D_k".into());
    }
    let mut edited = 0;
    for j in 0..n {
        let (a, b) = (model.params()[j], out.model.params()[j]);
        match out.edits[j] {
            Edit::None if a.to_bits() != b.to_bits() => {
                return err(format!("unedited parameter {j} changed"))
            }
            Edit::None => {}
            _ => {
                edited += 1;
                if a != 0.0 && !(b / a > 0.0 && b / a <= 1.0 + 1e-12) {
                    return err(format!("multiplier {} at {j}", b / a));
                }
            }
        }
    }
    // each parameter carries one edit tag, so matching counts means disjoint branches
    if edited != r.branch1_count + r.branch2_count {
        return err(format!(
            "{edited} edits vs report {} + {}",
            r.branch1_count, r.branch2_count
        ));
    }
    if erase(&model, &f_d, &f_f, &f_k, &cfg(0))
        .unwrap()
        .model
        .params()
        != model.params()
    {
        return err("m = 0 changed parameters".into());
    }
    let none = erase(
        &model,
        &f_d,
        &FisherDiag::empty(n, SubsetLabel::Forget),
        &f_k,
        &cfg(m),
    )
    .unwrap();
    if none.model.params() != model.params() {
        return err("empty D_f changed parameters".into());
    }
    if m < 1000 {
        let more = erase(&model, &f_d, &f_f, &f_k, &cfg(m + 1)).unwrap();
        if more.report.edited() < r.edited() {
            return err(format!(
                "edit count fell from {} to {} at m = {}",
                r.edited(),
                more.report.edited(),
                m + 1
            ));
        }
    }
    let single = erase_single_subset(&model, &f_d, &f_f, &cfg(m)).unwrap();
    if single.report.branch2_count != 0 {
        return err("single-subset erase used branch 2".into());
    }
    Ok(())
}
