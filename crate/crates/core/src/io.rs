//! Graph-bundle directories and model / request files.
//!
//! A bundle directory holds:
//!
//! | file | content |
//! |------|---------|
//! | `meta.json` | counts, name, `format_version` (1) |
//! | `edges.tsv` | `u<TAB>v` with `u < v`, one line per undirected edge |
//! | `features.csv` | one row of comma-separated floats per node |
//! | `labels.csv` | one class id per line |
//! | `splits.csv` | `train` or `test` per line |

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{EtrError, Result};
use crate::gnn::ModelState;
use crate::graph::GraphBundle;
use crate::linalg::Matrix;
use crate::request::UnlearnRequest;

pub const FORMAT_VERSION: u32 = 1;

pub const META_FILE: &str = "meta.json";
pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SPLITS_FILE: &str = "splits.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub name: String,
    pub format_version: u32,
    /// Fields written by other tools, kept verbatim.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl BundleManifest {
    pub fn of(graph: &GraphBundle) -> Self {
        Self {
            num_nodes: graph.num_nodes(),
            num_edges: graph.num_edges(),
            feature_dim: graph.feature_dim(),
            num_classes: graph.num_classes(),
            name: graph.name().to_string(),
            format_version: FORMAT_VERSION,
            extra: Map::new(),
        }
    }
}

/// Shortest decimal text that parses back to the same `f64`.
pub fn format_float(v: f64) -> String {
    format!("{v:?}")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| EtrError::io(path, e))
}

fn bad(file: &str, line: usize, msg: impl Into<String>) -> EtrError {
    EtrError::validation(file, Some(line), msg)
}

fn count_mismatch(file: &str, what: &str, expected: usize, found: usize) -> EtrError {
    EtrError::validation(
        file,
        None,
        format!("{META_FILE} declares {expected} {what}, file has {found}"),
    )
}

/// Numbered lines; a single trailing newline is allowed, blank lines are not.
fn lines<'a>(file: &'a str, text: &'a str) -> impl Iterator<Item = Result<(usize, &'a str)>> + 'a {
    text.lines().enumerate().map(move |(i, l)| {
        let l = l.strip_suffix('\r').unwrap_or(l);
        if l.trim().is_empty() {
            Err(bad(file, i + 1, "blank line"))
        } else {
            Ok((i + 1, l))
        }
    })
}

fn parse_index(file: &str, line: usize, tok: &str, what: &str) -> Result<usize> {
    tok.trim().parse::<usize>().map_err(|_| {
        bad(
            file,
            line,
            format!("{what} {tok:?} is not a nonnegative integer"),
        )
    })
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join(META_FILE);
    let text = read_text(&path)?;
    let meta: BundleManifest = serde_json::from_str(&text)
        .map_err(|e| EtrError::validation(META_FILE, Some(e.line()), e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(EtrError::validation(
            META_FILE,
            None,
            format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                meta.format_version
            ),
        ));
    }
    if meta.feature_dim == 0 || meta.num_classes == 0 {
        return Err(EtrError::validation(
            META_FILE,
            None,
            "feature_dim and num_classes must be positive",
        ));
    }
    Ok(meta)
}

/// Loads and validates a bundle directory.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<GraphBundle> {
    Ok(load_bundle_with_manifest(dir)?.0)
}

pub fn load_bundle_with_manifest(dir: impl AsRef<Path>) -> Result<(GraphBundle, BundleManifest)> {
    let dir = dir.as_ref();
    let meta = read_manifest(dir)?;
    let n = meta.num_nodes;
    let d = meta.feature_dim;

    let text = read_text(&dir.join(FEATURES_FILE))?;
    let mut values = Vec::with_capacity(n * d);
    let mut rows = 0;
    for item in lines(FEATURES_FILE, &text) {
        let (ln, l) = item?;
        let before = values.len();
        for tok in l.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| bad(FEATURES_FILE, ln, format!("unparseable float {tok:?}")))?;
            if !v.is_finite() {
                return Err(bad(FEATURES_FILE, ln, format!("non-finite value {tok:?}")));
            }
            values.push(v);
        }
        if values.len() - before != d {
            return Err(bad(
                FEATURES_FILE,
                ln,
                format!("expected {d} values, found {}", values.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != n {
        return Err(count_mismatch(FEATURES_FILE, "nodes", n, rows));
    }
    let features = Matrix::from_vec(n, d, values);

    let text = read_text(&dir.join(LABELS_FILE))?;
    let mut labels = Vec::with_capacity(n);
    for item in lines(LABELS_FILE, &text) {
        let (ln, l) = item?;
        let y = parse_index(LABELS_FILE, ln, l, "label")?;
        if y >= meta.num_classes {
            return Err(bad(
                LABELS_FILE,
                ln,
                format!("label {y} is not below num_classes {}", meta.num_classes),
            ));
        }
        labels.push(y);
    }
    if labels.len() != n {
        return Err(count_mismatch(LABELS_FILE, "nodes", n, labels.len()));
    }

    let text = read_text(&dir.join(SPLITS_FILE))?;
    let mut train_mask = Vec::with_capacity(n);
    for item in lines(SPLITS_FILE, &text) {
        let (ln, l) = item?;
        match l.trim() {
            "train" => train_mask.push(true),
            "test" => train_mask.push(false),
            other => {
                return Err(bad(
                    SPLITS_FILE,
                    ln,
                    format!("unknown split token {other:?}"),
                ))
            }
        }
    }
    if train_mask.len() != n {
        return Err(count_mismatch(SPLITS_FILE, "nodes", n, train_mask.len()));
    }
    let test_mask = train_mask.iter().map(|t| !t).collect();

    let text = read_text(&dir.join(EDGES_FILE))?;
    let mut edges = Vec::with_capacity(meta.num_edges);
    let mut seen = std::collections::HashSet::with_capacity(meta.num_edges);
    for item in lines(EDGES_FILE, &text) {
        let (ln, l) = item?;
        let mut parts = l.split('\t');
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad(EDGES_FILE, ln, "expected two tab-separated node ids"));
        };
        let u = parse_index(EDGES_FILE, ln, a, "node id")?;
        let v = parse_index(EDGES_FILE, ln, b, "node id")?;
        if u == v {
            return Err(bad(EDGES_FILE, ln, format!("self-loop at node {u}")));
        }
        if u > v {
            return Err(bad(
                EDGES_FILE,
                ln,
                format!("edge ({u},{v}) must be written with u < v"),
            ));
        }
        if v >= n {
            return Err(bad(
                EDGES_FILE,
                ln,
                format!("node id {v} out of range for {n} nodes"),
            ));
        }
        if !seen.insert((u, v)) {
            return Err(bad(EDGES_FILE, ln, format!("duplicate edge ({u},{v})")));
        }
        edges.push((u, v));
    }
    if edges.len() != meta.num_edges {
        return Err(count_mismatch(
            EDGES_FILE,
            "edges",
            meta.num_edges,
            edges.len(),
        ));
    }

    let graph = GraphBundle::new(
        &edges,
        features,
        labels,
        train_mask,
        test_mask,
        meta.num_classes,
    )
    .map_err(|e| EtrError::validation(META_FILE, None, e.to_string()))?
    .with_name(meta.name.clone());
    Ok((graph, meta))
}

/// Writes `contents` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| EtrError::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| EtrError::io(path, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| EtrError::io(path, e))?;
    tmp.persist(path).map_err(|e| EtrError::io(path, e.error))?;
    Ok(())
}

pub fn save_bundle(graph: &GraphBundle, dir: impl AsRef<Path>) -> Result<()> {
    save_bundle_with_manifest(graph, &BundleManifest::of(graph), dir)
}

/// Saves `graph`; extra manifest fields from `meta` are carried over, counts
/// are always taken from `graph`.
pub fn save_bundle_with_manifest(
    graph: &GraphBundle,
    meta: &BundleManifest,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| EtrError::io(dir, e))?;

    let mut edges = String::new();
    for (u, v) in graph.edges() {
        writeln!(edges, "{u}\t{v}").expect("write to string");
    }

    let x = graph.features();
    let mut features = String::with_capacity(x.rows() * x.cols() * 4);
    for i in 0..x.rows() {
        for (k, &v) in x.row(i).iter().enumerate() {
            if k > 0 {
                features.push(',');
            }
            features.push_str(&format_float(v));
        }
        features.push('\n');
    }

    let mut labels = String::new();
    for y in graph.labels() {
        writeln!(labels, "{y}").expect("write to string");
    }
    let mut splits = String::new();
    for &t in graph.train_mask() {
        splits.push_str(if t { "train\n" } else { "test\n" });
    }

    let meta = BundleManifest {
        extra: meta.extra.clone(),
        ..BundleManifest::of(graph)
    };
    let mut meta_text = serde_json::to_string_pretty(&meta).expect("manifest serializes");
    meta_text.push('\n');

    write_atomic(&dir.join(EDGES_FILE), edges.as_bytes())?;
    write_atomic(&dir.join(FEATURES_FILE), features.as_bytes())?;
    write_atomic(&dir.join(LABELS_FILE), labels.as_bytes())?;
    write_atomic(&dir.join(SPLITS_FILE), splits.as_bytes())?;
    write_atomic(&dir.join(META_FILE), meta_text.as_bytes())
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelState> {
    let path = path.as_ref();
    ModelState::from_json(&read_text(path)?).map_err(|e| match e {
        EtrError::Input(msg) => EtrError::validation(path.display().to_string(), None, msg),
        other => other,
    })
}

pub fn write_model(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut text = model.to_json();
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

/// Parses a request file; empty requests are rejected.
pub fn read_request(path: impl AsRef<Path>) -> Result<UnlearnRequest> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let req: UnlearnRequest = serde_json::from_str(&text).map_err(|e| {
        EtrError::validation(path.display().to_string(), Some(e.line()), e.to_string())
    })?;
    if req.is_empty() {
        return Err(EtrError::validation(
            path.display().to_string(),
            None,
            "request is empty",
        ));
    }
    Ok(req)
}
