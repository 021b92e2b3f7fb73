use std::fs;
use std::path::Path;

use etr::io::load_bundle;
use etr::EtrError;

const META: &str = r#"{"num_nodes":4,"num_edges":3,"feature_dim":2,"num_classes":2,"name":"toy","format_version":1}"#;
const EDGES: &str = "0\t1\n1\t2\n2\t3\n";
const FEATURES: &str = "0.5,1.0\n-1.25,0.0\n3.0,2.0\n0.0,1e-3\n";
const LABELS: &str = "0\n1\n1\n0\n";
const SPLITS: &str = "train\ntrain\ntest\ntrain\n";

fn write_bundle(dir: &Path, patch: (&str, &str)) {
    for (name, body) in [
        ("meta.json", META),
        ("edges.tsv", EDGES),
        ("features.csv", FEATURES),
        ("labels.csv", LABELS),
        ("splits.csv", SPLITS),
    ] {
        let text = if name == patch.0 { patch.1 } else { body };
        fs::write(dir.join(name), text).unwrap();
    }
}

#[test]
fn clean_fixture_loads() {
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), ("", ""));
    let g = load_bundle(dir.path()).unwrap();
    assert_eq!(
        (
            g.num_nodes(),
            g.num_edges(),
            g.feature_dim(),
            g.num_classes()
        ),
        (4, 3, 2, 2)
    );
    assert!(g.has_edge(1, 0));
}

#[test]
fn corrupt_fixtures_are_rejected() {
    // (file replaced, contents, file blamed, line blamed if any)
    let corpus: &[(&str, &str, &str, Option<usize>)] = &[
        ("edges.tsv", "0\t1\n1\t2\n3\t3\n", "edges.tsv", Some(3)),
        ("edges.tsv", "0\t1\n2\t1\n2\t3\n", "edges.tsv", Some(2)),
        ("edges.tsv", "0\t1\n1\t2\n0\t1\n", "edges.tsv", Some(3)),
        ("edges.tsv", "0\t1\n1\t2\n2\t9\n", "edges.tsv", Some(3)),
        ("edges.tsv", "0\t1\n1\t2\n", "edges.tsv", None),
        ("edges.tsv", "0\t1\t1\n1\t2\n2\t3\n", "edges.tsv", Some(1)),
        ("edges.tsv", "0\t1\n1\tx\n2\t3\n", "edges.tsv", Some(2)),
        (
            "features.csv",
            "0.5,1.0\nabc,0.0\n3.0,2.0\n0.0,1e-3\n",
            "features.csv",
            Some(2),
        ),
        (
            "features.csv",
            "0.5,1.0\n-1.25,0.0\nNaN,2.0\n0.0,1e-3\n",
            "features.csv",
            Some(3),
        ),
        (
            "features.csv",
            "0.5,1.0\n-1.25,0.0\n3.0,2.0\n1.0\n",
            "features.csv",
            Some(4),
        ),
        (
            "features.csv",
            "0.5,1.0\n\n3.0,2.0\n0.0,1e-3\n",
            "features.csv",
            Some(2),
        ),
        (
            "features.csv",
            "0.5,1.0\n-1.25,0.0\n3.0,2.0\n",
            "features.csv",
            None,
        ),
        ("labels.csv", "5\n1\n1\n0\n", "labels.csv", Some(1)),
        ("labels.csv", "0\n1\n-1\n0\n", "labels.csv", Some(3)),
        ("labels.csv", "0\n1\n1\n", "labels.csv", None),
        (
            "splits.csv",
            "train\nvalidation\ntest\ntrain\n",
            "splits.csv",
            Some(2),
        ),
        (
            "splits.csv",
            "train\ntrain\ntest\ntrain\ntest\n",
            "splits.csv",
            None,
        ),
        (
            "meta.json",
            r#"{"num_nodes":4,"num_edges":3,"feature_dim":2,"num_classes":2,"name":"toy","format_version":2}"#,
            "meta.json",
            None,
        ),
        (
            "meta.json",
            r#"{"num_nodes":4,"num_edges":3,"feature_dim":2,"name":"toy","format_version":1}"#,
            "meta.json",
            None,
        ),
        (
            "meta.json",
            r#"{"num_nodes":5,"num_edges":3,"feature_dim":2,"num_classes":2,"name":"toy","format_version":1}"#,
            "features.csv",
            None,
        ),
    ];
    assert!(corpus.len() >= 10);
    for &(file, body, blamed, line) in corpus {
        let dir = tempfile::tempdir().unwrap();
        write_bundle(dir.path(), (file, body));
        match load_bundle(dir.path()) {
            Err(EtrError::Validation {
                file: f,
                line: l,
                message,
            }) => {
                assert_eq!(f, blamed, "{body:?}: {message}");
                if line.is_some() {
                    assert_eq!(l, line, "{file} {body:?}: {message}");
                }
            }
            other => panic!("{file} {body:?} was not rejected as invalid: {other:?}"),
        }
    }
}
