//! Command-line front end. Standard output carries only JSON or CSV; prose
//! and errors go to standard error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::error::{EtrError, Result};
use crate::eval::{
    adversarial_experiment, gradient_diff, map_parallel, measure, micro_f1, rms_param_distance,
    to_csv, AttackConfig, CsvRow, EvalResult,
};
use crate::fisher::{subset_stats, FisherDiag, FisherMode, SubsetLabel, RATIO_EPS};
use crate::generate::{generate_sbm, SbmParams};
use crate::gnn::{forward, predict, train_logged, GcnInput, ModelState, TrainConfig};
use crate::graph::GraphBundle;
use crate::io::{load_bundle, read_model, read_request, save_bundle, write_atomic, write_model};
use crate::request::{affected_subgraph, remove_request, UnlearnRequest};
use crate::unlearn::{bound_audit, ratio_mask_set, unlearn_detailed, EraseConfig, RectifyConfig};

#[derive(Debug, Parser)]
#[command(
    name = "etr",
    version,
    about = "Training-free unlearning for two-layer GCNs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a GCN and store the gradient snapshot needed for unlearning.
    Train(TrainCmd),
    /// Unlearn nodes, edges or features from a trained model.
    Unlearn(UnlearnCmd),
    /// Train from scratch on the graph with a request applied.
    Retrain(RetrainCmd),
    /// Compare up to three models; emits CSV.
    Eval(EvalCmd),
    /// Adversarial-edge experiment; emits CSV.
    Attack(AttackCmd),
    /// Write a stochastic block model bundle.
    GenSbm(GenSbmCmd),
    /// Evaluate the masking bound for a top-ratio mask.
    Audit(AuditCmd),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Learning rate [default: 1.0]
    #[arg(long)]
    lr: Option<f64>,
    /// L2 weight decay [default: 5e-5]
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    /// Skip storing the training-set Fisher diagonal.
    #[arg(long)]
    no_fisher: bool,
    /// Accept learning rate / weight decay outside the validated ranges.
    #[arg(long)]
    force: bool,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            hidden_dim: self.hidden,
            epochs: self.epochs,
            learning_rate: self.lr.unwrap_or(d.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            seed: self.seed,
            init_scale: self.init_scale,
            store_fisher: !self.no_fisher,
            force: self.force,
        }
    }

    /// Which hyperparameters came from toolkit defaults rather than flags.
    fn provenance(&self) -> Value {
        let src = |v: Option<f64>| {
            if v.is_some() {
                "flag"
            } else {
                "toolkit default"
            }
        };
        json!({ "learning_rate": src(self.lr), "weight_decay": src(self.weight_decay) })
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FisherModeArg {
    PerSample,
    Batch,
}

#[derive(Debug, Args)]
struct EraseArgs {
    /// Per-mille of parameters selected per Erase branch.
    #[arg(long = "m", default_value_t = 10)]
    m: u32,
    /// Neighborhood radius for D_k / D_i.
    #[arg(long = "k", default_value_t = 2)]
    k: usize,
    #[arg(long)]
    a: Option<f64>,
    #[arg(long)]
    b: Option<f64>,
    #[arg(long, default_value_t = RATIO_EPS)]
    eps: f64,
    #[arg(long, value_enum, default_value_t = FisherModeArg::PerSample)]
    fisher_mode: FisherModeArg,
}

impl EraseArgs {
    fn config(&self) -> EraseConfig {
        EraseConfig {
            m_permille: self.m,
            k_hops: self.k,
            a_override: self.a,
            b_override: self.b,
            eps: self.eps,
            fisher_mode: match self.fisher_mode {
                FisherModeArg::PerSample => FisherMode::PerSample,
                FisherModeArg::Batch => FisherMode::Batch,
            },
        }
    }
}

#[derive(Debug, Args)]
struct RectifyArgs {
    #[arg(long = "lambda", default_value_t = 0.4)]
    lambda: f64,
    /// Accept lambda outside [0, 0.9].
    #[arg(long = "force-lambda")]
    force_lambda: bool,
}

impl RectifyArgs {
    fn config(&self) -> RectifyConfig {
        RectifyConfig {
            lambda: self.lambda,
            force: self.force_lambda,
        }
    }
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct UnlearnCmd {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    request: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write the report here (it is always printed).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Compare the rectify gradient with the exact remaining-data gradient
    /// (reads the whole remaining graph).
    #[arg(long)]
    check_gradient: bool,
    #[command(flatten)]
    erase: EraseArgs,
    #[command(flatten)]
    rectify: RectifyArgs,
}

#[derive(Debug, Args)]
struct RetrainCmd {
    #[arg(long)]
    data: PathBuf,
    /// Request to apply first; omitted means train on the graph as is.
    #[arg(long)]
    request: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Debug, Args)]
struct EvalCmd {
    #[arg(long)]
    data: PathBuf,
    /// Evaluate on the graph with this request applied.
    #[arg(long)]
    request: Option<PathBuf>,
    #[arg(long)]
    vanilla: Option<PathBuf>,
    #[arg(long)]
    unlearned: Option<PathBuf>,
    /// Reference for the parameter distance column.
    #[arg(long)]
    retrained: Option<PathBuf>,
    /// Value for the seed column.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Value for the ratio column.
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(Debug, Args)]
struct AttackCmd {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated attack ratios.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3")]
    ratios: Vec<f64>,
    /// Comma-separated seeds; each seeds both edge sampling and training.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    train: TrainArgs,
    #[command(flatten)]
    erase: EraseArgs,
    #[command(flatten)]
    rectify: RectifyArgs,
}

#[derive(Debug, Args)]
struct GenSbmCmd {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 300)]
    nodes: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 0.05)]
    p_in: f64,
    #[arg(long, default_value_t = 0.005)]
    p_out: f64,
    #[arg(long, default_value_t = 16)]
    features: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct AuditCmd {
    /// Model trained on the full graph.
    #[arg(long)]
    model: PathBuf,
    /// Model retrained on the graph with the request applied.
    #[arg(long)]
    retrained: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Node request defining D_f.
    #[arg(long)]
    request: PathBuf,
    #[arg(long = "m", default_value_t = 10)]
    m: u32,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(payload) => {
            let mut out = std::io::stdout().lock();
            match out.write_all(payload.as_bytes()).and_then(|_| out.flush()) {
                Ok(()) => 0,
                Err(e) => report_error(&EtrError::io("<stdout>", e)),
            }
        }
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &EtrError) -> i32 {
    let code = e.exit_code();
    let mut body = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
    if let EtrError::State(_) = e {
        body["remediation"] =
            json!("retrain the model with `etr train` so the gradient snapshot is stored");
    }
    eprintln!("{body}");
    code
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Train(c) => cmd_train(c),
        Command::Unlearn(c) => cmd_unlearn(c),
        Command::Retrain(c) => cmd_retrain(c),
        Command::Eval(c) => cmd_eval(c),
        Command::Attack(c) => cmd_attack(c),
        Command::GenSbm(c) => cmd_gen_sbm(c),
        Command::Audit(c) => cmd_audit(c),
    }
}

fn json_line(v: &Value) -> String {
    format!("{v}\n")
}

/// Refuses to write over an input file.
fn check_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    for input in inputs {
        let same =
            out == *input || matches!((canon(out), canon(input)), (Some(a), Some(b)) if a == b);
        if same {
            return Err(EtrError::input(format!(
                "output {} would overwrite an input file",
                out.display()
            )));
        }
    }
    Ok(())
}

fn split_f1(graph: &GraphBundle, model: &ModelState) -> Result<(Option<f64>, Option<f64>)> {
    let pred = predict(graph, model)?;
    let f1 = |nodes: Vec<usize>| -> Result<Option<f64>> {
        if nodes.is_empty() {
            Ok(None)
        } else {
            micro_f1(&pred, graph.labels(), &nodes).map(Some)
        }
    };
    Ok((f1(graph.train_nodes())?, f1(graph.test_nodes())?))
}

fn train_summary(
    graph: &GraphBundle,
    args: &TrainArgs,
    run: impl FnOnce() -> Result<(ModelState, Vec<f64>)>,
) -> Result<(ModelState, Value)> {
    let measured = measure(run);
    let (model, losses) = measured.value?;
    let (train_f1, test_f1) = split_f1(graph, &model)?;
    let summary = json!({
        "train_f1": train_f1,
        "test_f1": test_f1,
        "first_loss": losses.first(),
        "last_epoch_loss": losses.last(),
        "num_params": model.num_params(),
        "train_size": model.train_size,
        "config": args.config(),
        "hyperparameter_source": args.provenance(),
        "wall_time_s": measured.wall_time_s,
        "peak_mem_estimate_bytes": measured.peak_mem_estimate_bytes,
    });
    Ok((model, summary))
}

fn cmd_train(c: TrainCmd) -> Result<String> {
    check_output(&c.out, &[&c.data])?;
    let graph = load_bundle(&c.data)?;
    let cfg = c.train.config();
    let (model, summary) = train_summary(&graph, &c.train, || {
        let o = train_logged(&graph, &cfg)?;
        Ok((o.model, o.losses))
    })?;
    write_model(&model, &c.out)?;
    Ok(json_line(&summary))
}

fn cmd_retrain(c: RetrainCmd) -> Result<String> {
    let mut inputs = vec![c.data.as_path()];
    if let Some(r) = &c.request {
        inputs.push(r);
    }
    check_output(&c.out, &inputs)?;
    let graph = load_bundle(&c.data)?;
    let request = match &c.request {
        Some(p) => read_request(p)?,
        None => UnlearnRequest::nodes(Vec::new()),
    };
    let (remaining, _) = remove_request(&graph, &request)?;
    let cfg = c.train.config();
    let (model, mut summary) = train_summary(&remaining, &c.train, || {
        let o = train_logged(&remaining, &cfg)?;
        Ok((o.model, o.losses))
    })?;
    summary["request_kind"] = json!(request.kind());
    summary["request_size"] = json!(request.len());
    write_model(&model, &c.out)?;
    Ok(json_line(&summary))
}

fn cmd_unlearn(c: UnlearnCmd) -> Result<String> {
    check_output(&c.out, &[&c.model, &c.data, &c.request])?;
    if let Some(r) = &c.report {
        check_output(r, &[&c.model, &c.data, &c.request, &c.out])?;
    }
    let model = read_model(&c.model)?;
    if model.grad_snapshot.is_none() {
        return Err(EtrError::State(format!(
            "{} has no stored training gradient",
            c.model.display()
        )));
    }
    let graph = load_bundle(&c.data)?;
    let request = read_request(&c.request)?;
    let measured = measure(|| {
        unlearn_detailed(
            &model,
            &graph,
            &request,
            &c.erase.config(),
            &c.rectify.config(),
        )
    });
    let outcome = measured.value?;
    let mut report =
        serde_json::to_value(&outcome.report).map_err(|e| EtrError::input(e.to_string()))?;
    report["wall_time_s"] = json!(measured.wall_time_s);
    report["peak_mem_estimate_bytes"] = json!(measured.peak_mem_estimate_bytes);
    if c.check_gradient {
        let direct = outcome.direct_remaining_gradient()?;
        let (ad, rd) = gradient_diff(&outcome.rectify_gradient, &direct)?;
        report["grad_ad"] = json!(ad);
        report["grad_rd"] = json!(rd);
    }
    let (train_f1, test_f1) = split_f1(&outcome.remaining, &outcome.model)?;
    report["remaining_train_f1"] = json!(train_f1);
    report["test_f1"] = json!(test_f1);
    write_model(&outcome.model, &c.out)?;
    let text = json_line(&report);
    if let Some(r) = &c.report {
        write_atomic(r, text.as_bytes())?;
    }
    Ok(text)
}

fn cmd_eval(c: EvalCmd) -> Result<String> {
    let graph = load_bundle(&c.data)?;
    let graph = match &c.request {
        Some(p) => remove_request(&graph, &read_request(p)?)?.0,
        None => graph,
    };
    let retrained = c.retrained.as_ref().map(read_model).transpose()?;
    let mut rows = Vec::new();
    let models = [
        ("vanilla", &c.vanilla),
        ("etr", &c.unlearned),
        ("retrain", &c.retrained),
    ];
    if models.iter().all(|(_, p)| p.is_none()) {
        return Err(EtrError::input(
            "eval needs at least one of --vanilla, --unlearned, --retrained",
        ));
    }
    for (method, path) in models {
        let Some(path) = path else { continue };
        let model = read_model(path)?;
        let f1 = measure(|| split_f1(&graph, &model));
        let test = f1
            .value?
            .1
            .ok_or_else(|| EtrError::input("graph has no test nodes"))?;
        let rms = retrained
            .as_ref()
            .map(|r| rms_param_distance(&model, r))
            .transpose()?;
        let result = EvalResult {
            micro_f1: test,
            rms_param_distance: rms,
            grad_ad: None,
            grad_rd: None,
            wall_time_s: Some(f1.wall_time_s),
            peak_mem_estimate_bytes: f1.peak_mem_estimate_bytes,
        };
        rows.push(CsvRow::from_eval(c.ratio, c.seed, method, &result));
    }
    Ok(to_csv(&rows))
}

/// Worker count for fan-out, from `ETR_THREADS` (default 1).
fn worker_threads() -> Result<usize> {
    match std::env::var("ETR_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                EtrError::input(format!("ETR_THREADS must be a positive integer, got {v:?}"))
            }),
        Err(_) => Ok(1),
    }
}

fn cmd_attack(c: AttackCmd) -> Result<String> {
    let graph = load_bundle(&c.data)?;
    let threads = worker_threads()?;
    let base = AttackConfig {
        train: c.train.config(),
        erase: c.erase.config(),
        rectify: c.rectify.config(),
    };
    let cells = map_parallel(&c.seeds, threads, |&seed| {
        let mut cfg = base.clone();
        cfg.train.seed = seed;
        adversarial_experiment(&graph, &c.ratios, &cfg, seed)
    });
    let mut rows = Vec::new();
    for cell in cells {
        for r in cell? {
            rows.extend(r.csv_rows());
        }
    }
    eprintln!("attack: F1 on the clean graph's test split");
    Ok(to_csv(&rows))
}

fn cmd_gen_sbm(c: GenSbmCmd) -> Result<String> {
    let g = generate_sbm(&SbmParams {
        num_nodes: c.nodes,
        num_classes: c.classes,
        p_in: c.p_in,
        p_out: c.p_out,
        feature_dim: c.features,
        seed: c.seed,
    })?;
    save_bundle(&g, &c.out)?;
    Ok(json_line(&json!({
        "out": c.out,
        "num_nodes": g.num_nodes(),
        "num_edges": g.num_edges(),
        "feature_dim": g.feature_dim(),
        "num_classes": g.num_classes(),
        "seed": c.seed,
    })))
}

fn cmd_audit(c: AuditCmd) -> Result<String> {
    let star = read_model(&c.model)?;
    let retrained = read_model(&c.retrained)?;
    let graph = load_bundle(&c.data)?;
    let request = read_request(&c.request)?;
    if !matches!(request, UnlearnRequest::Node { .. }) {
        return Err(EtrError::input("audit takes a node request"));
    }
    let subsets = affected_subgraph(&graph, &request, 0)?;
    let input = GcnInput::new(&graph);
    let trace = forward(&input, &star)?;
    let labels = graph.labels();
    let mode = FisherMode::PerSample;
    let diag = |nodes: &[usize], label| -> Result<FisherDiag> {
        if nodes.is_empty() {
            return Ok(FisherDiag::empty(star.num_params(), label));
        }
        Ok(subset_stats(&input, &trace, labels, &star, nodes, label, mode)?.fisher)
    };
    let f_d = diag(&graph.train_nodes(), SubsetLabel::Train)?;
    let f_df = diag(&subsets.d_f, SubsetLabel::Forget)?;
    let f_dr = diag(&subsets.d_r, SubsetLabel::Remaining)?;
    let mask = ratio_mask_set(&f_d, &f_df, c.m, RATIO_EPS)?;
    let audit = bound_audit(&star, Some(&retrained), &f_d, &f_df, &f_dr, &mask)?;
    let mut v = serde_json::to_value(&audit).map_err(|e| EtrError::input(e.to_string()))?;
    v["m_permille"] = json!(c.m);
    v["note"] = json!("the inequality q <= rhs is reported, not asserted");
    Ok(json_line(&v))
}
