//! Retrain oracle, metrics, measurement, and the adversarial-edge experiment.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{EtrError, Result};
use crate::generate::inject_adversarial_edges;
use crate::gnn::{predict, train, ModelState, TrainConfig};
use crate::graph::GraphBundle;
use crate::request::{remove_request, UnlearnRequest};
use crate::unlearn::{unlearn, EraseConfig, RectifyConfig};

/// Trains from scratch on the graph with `request` applied, using `config`
/// unchanged (same seed).
pub fn retrain_oracle(
    graph: &GraphBundle,
    request: &UnlearnRequest,
    config: &TrainConfig,
) -> Result<ModelState> {
    let (remaining, _) = remove_request(graph, request)?;
    train(&remaining, config)
}

/// Fraction of `mask` nodes whose prediction equals the label (micro-F1 for
/// single-label multi-class data).
pub fn micro_f1(predictions: &[usize], labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(EtrError::input("micro-F1 over an empty mask"));
    }
    let mut hits = 0usize;
    for &i in mask {
        let (Some(p), Some(y)) = (predictions.get(i), labels.get(i)) else {
            return Err(EtrError::input(format!("mask node {i} out of range")));
        };
        hits += usize::from(p == y);
    }
    Ok(hits as f64 / mask.len() as f64)
}

/// Test-split micro-F1 of `model` on `graph`.
pub fn test_f1(graph: &GraphBundle, model: &ModelState) -> Result<f64> {
    micro_f1(&predict(graph, model)?, graph.labels(), &graph.test_nodes())
}

pub fn rms_param_distance(a: &ModelState, b: &ModelState) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(EtrError::input(format!(
            "models differ in shape: {}x{}x{} vs {}x{}x{}",
            a.feature_dim(),
            a.hidden_dim(),
            a.num_classes(),
            b.feature_dim(),
            b.hidden_dim(),
            b.num_classes()
        )));
    }
    let sq: f64 = a
        .params()
        .iter()
        .zip(b.params())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok((sq / a.num_params() as f64).sqrt())
}

/// Mean absolute difference and relative L2 difference of two gradients.
pub fn gradient_diff(approx: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if approx.len() != truth.len() {
        return Err(EtrError::input(format!(
            "gradient lengths differ: {} vs {}",
            approx.len(),
            truth.len()
        )));
    }
    if approx.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut abs = 0.0;
    let mut sq = 0.0;
    for (a, t) in approx.iter().zip(truth) {
        let e = a - t;
        abs += e.abs();
        sq += e * e;
    }
    let ad = abs / approx.len() as f64;
    let rd = sq.sqrt() / (crate::linalg::norm2(truth) + 1e-12);
    Ok((ad, rd))
}

/// Result of [`measure`].
#[derive(Debug, Clone)]
pub struct Measured<T> {
    pub value: T,
    pub wall_time_s: f64,
    /// Peak resident set size seen while the procedure ran. An estimate from
    /// periodic sampling; `None` where the platform offers no reading.
    pub peak_mem_estimate_bytes: Option<u64>,
}

fn resident_bytes() -> Option<u64> {
    let statm = std::fs::read_to_string("/proc/self/statm").ok()?;
    let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
    Some(pages * 4096)
}

const RSS_SAMPLE_PERIOD: Duration = Duration::from_millis(2);

/// Times `run` and samples the process RSS while it runs.
pub fn measure<T>(run: impl FnOnce() -> T) -> Measured<T> {
    let done = AtomicBool::new(false);
    let start_rss = resident_bytes();
    let (value, wall_time_s, sampled) = std::thread::scope(|s| {
        let sampler = s.spawn(|| {
            let mut peak = resident_bytes();
            while !done.load(Ordering::Relaxed) {
                std::thread::sleep(RSS_SAMPLE_PERIOD);
                peak = peak.max(resident_bytes());
            }
            peak
        });
        let t = Instant::now();
        let value = run();
        let elapsed = t.elapsed().as_secs_f64();
        done.store(true, Ordering::Relaxed);
        (value, elapsed, sampler.join().unwrap_or(None))
    });
    let peak = [start_rss, sampled, resident_bytes()]
        .into_iter()
        .flatten()
        .max();
    Measured {
        value,
        wall_time_s,
        peak_mem_estimate_bytes: peak,
    }
}

/// Metrics for one model in one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub micro_f1: f64,
    pub rms_param_distance: Option<f64>,
    pub grad_ad: Option<f64>,
    pub grad_rd: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub peak_mem_estimate_bytes: Option<u64>,
}

pub const CSV_HEADER: &str = "ratio,seed,method,f1,rms_dist,ad,rd,time_s";

/// One line of the results CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub ratio: Option<f64>,
    pub seed: u64,
    pub method: String,
    pub f1: f64,
    pub rms_dist: Option<f64>,
    pub ad: Option<f64>,
    pub rd: Option<f64>,
    pub time_s: Option<f64>,
}

impl CsvRow {
    pub fn from_eval(ratio: Option<f64>, seed: u64, method: &str, r: &EvalResult) -> Self {
        Self {
            ratio,
            seed,
            method: method.to_string(),
            f1: r.micro_f1,
            rms_dist: r.rms_param_distance,
            ad: r.grad_ad,
            rd: r.grad_rd,
            time_s: r.wall_time_s,
        }
    }
}

/// Renders rows under [`CSV_HEADER`]; absent values are empty fields.
pub fn to_csv(rows: &[CsvRow]) -> String {
    fn opt(v: Option<f64>) -> String {
        v.map(|x| format!("{x}")).unwrap_or_default()
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            opt(r.ratio),
            r.seed,
            r.method,
            r.f1,
            opt(r.rms_dist),
            opt(r.ad),
            opt(r.rd),
            opt(r.time_s)
        )
        .expect("write to string");
    }
    out
}

/// Settings shared by every cell of the adversarial experiment.
#[derive(Debug, Clone, Default)]
pub struct AttackConfig {
    pub train: TrainConfig,
    pub erase: EraseConfig,
    pub rectify: RectifyConfig,
}

/// One attack ratio of the adversarial experiment. All F1 values are on the
/// clean graph's test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub ratio: f64,
    pub seed: u64,
    pub injected_edges: usize,
    pub vanilla_f1: f64,
    pub unlearned_f1: f64,
    pub retrain_f1: f64,
    pub vanilla_time_s: f64,
    pub unlearn_time_s: f64,
    pub retrain_time_s: f64,
}

impl AttackRow {
    pub fn csv_rows(&self) -> [CsvRow; 3] {
        let row = |method: &str, f1: f64, t: f64| CsvRow {
            ratio: Some(self.ratio),
            seed: self.seed,
            method: method.into(),
            f1,
            rms_dist: None,
            ad: None,
            rd: None,
            time_s: Some(t),
        };
        [
            row("vanilla", self.vanilla_f1, self.vanilla_time_s),
            row("etr", self.unlearned_f1, self.unlearn_time_s),
            row("retrain", self.retrain_f1, self.retrain_time_s),
        ]
    }
}

/// For each ratio: poison the training graph with cross-class edges, train on
/// it, unlearn the injected edges, and compare against a model trained on the
/// clean graph. Edge sampling uses `seed`; training uses `config.train.seed`.
pub fn adversarial_experiment(
    graph: &GraphBundle,
    ratios: &[f64],
    config: &AttackConfig,
    seed: u64,
) -> Result<Vec<AttackRow>> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(EtrError::input(format!("attack ratio {r} not in [0, 1]")));
    }
    let clean = measure(|| train(graph, &config.train));
    let retrained = clean.value?;
    let retrain_f1 = test_f1(graph, &retrained)?;

    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let (poisoned, added) = inject_adversarial_edges(graph, ratio, seed)?;
        let vanilla = measure(|| train(&poisoned, &config.train));
        let vanilla_model = vanilla.value?;
        let request = UnlearnRequest::edges(&added);
        let etr = measure(|| {
            unlearn(
                &vanilla_model,
                &poisoned,
                &request,
                &config.erase,
                &config.rectify,
            )
        });
        let (unlearned, _) = etr.value?;
        rows.push(AttackRow {
            ratio,
            seed,
            injected_edges: added.len(),
            vanilla_f1: test_f1(graph, &vanilla_model)?,
            unlearned_f1: test_f1(graph, &unlearned)?,
            retrain_f1,
            vanilla_time_s: vanilla.wall_time_s,
            unlearn_time_s: etr.wall_time_s,
            retrain_time_s: clean.wall_time_s,
        });
    }
    Ok(rows)
}

/// Maps `f` over `items` on at most `threads` workers, keeping input order.
pub fn map_parallel<T: Sync, R: Send>(
    items: &[T],
    threads: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    use rayon::prelude::*;
    let threads = threads.max(1);
    if threads == 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}
