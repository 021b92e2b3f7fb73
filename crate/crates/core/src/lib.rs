//! Training-free graph unlearning for two-layer GCNs.
//!
//! The pipeline edits the parameters a trained model relies on most for the
//! data being forgotten (scaled by empirical Fisher-diagonal importance), then
//! applies one gradient step on an estimate of the remaining-data gradient
//! assembled from a gradient stored at the end of training.

pub mod cli;
pub mod error;
pub mod eval;
pub mod fisher;
pub mod generate;
pub mod gnn;
pub mod graph;
pub mod io;
pub mod linalg;
pub mod request;
pub mod unlearn;

pub use error::{EtrError, Result};
pub use fisher::{fisher_diag, FisherDiag, FisherMode, SubsetLabel};
pub use generate::{generate_sbm, inject_adversarial_edges, SbmParams};
pub use gnn::{
    backward, forward, loss, per_node_gradient, predict, train, GcnInput, ModelState, TrainConfig,
};
pub use graph::{build_propagation, k_hop_neighborhood, GraphBundle, PropagationMatrix};
pub use request::{
    affected_subgraph, remove_request, NodeMapping, NodeSubsets, TaskKind, UnlearnRequest,
};
pub use unlearn::{bound_audit, erase, unlearn, EraseConfig, RectifyConfig, UnlearnReport};
