//! Trains on a bundle, unlearns 5% of the training nodes, and compares the
//! result with retraining from scratch.
//!
//! ```text
//! cargo run --release --example node_unlearning -- data/cora
//! ```

use etr::eval::{measure, rms_param_distance, test_f1};
use etr::io::load_bundle;
use etr::unlearn::unlearn_detailed;
use etr::{remove_request, train, EraseConfig, RectifyConfig, TrainConfig, UnlearnRequest};
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn main() -> etr::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "data/cora".into());
    let graph = load_bundle(&dir)?;
    let cfg = TrainConfig::default();

    let trained = measure(|| train(&graph, &cfg));
    let model = trained.value?;
    println!(
        "train: {:.2}s  test F1 {:.4}",
        trained.wall_time_s,
        test_f1(&graph, &model)?
    );

    let mut nodes = graph.train_nodes();
    nodes.shuffle(&mut rand_pcg::Pcg64::seed_from_u64(0));
    nodes.truncate(nodes.len() / 20);
    let request = UnlearnRequest::nodes(nodes);

    let etr = measure(|| {
        unlearn_detailed(
            &model,
            &graph,
            &request,
            &EraseConfig::default(),
            &RectifyConfig::default(),
        )
    });
    let out = etr.value?;
    let (remaining, _) = remove_request(&graph, &request)?;
    let retrain_cfg = TrainConfig {
        store_fisher: false,
        ..cfg
    };
    let retrained = measure(|| train(&remaining, &retrain_cfg));
    let gold = retrained.value?;

    println!(
        "unlearn: {:.3}s  F1 {:.4}  edits {}/{}  timings {:?}",
        etr.wall_time_s,
        test_f1(&remaining, &out.model)?,
        out.report.erase.branch1_count,
        out.report.erase.branch2_count,
        out.report.timings
    );
    println!(
        "retrain: {:.2}s  F1 {:.4}",
        retrained.wall_time_s,
        test_f1(&remaining, &gold)?
    );
    println!(
        "speedup {:.1}x  rms(etr, retrain) {:.3e}  rms(original, retrain) {:.3e}",
        retrained.wall_time_s / etr.wall_time_s,
        rms_param_distance(&out.model, &gold)?,
        rms_param_distance(&model, &gold)?
    );
    Ok(())
}
