use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn etr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etr"))
        .args(args)
        .output()
        .unwrap()
}

fn etr_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etr"))
        .args(args)
        .env(key, value)
        .output()
        .unwrap()
}

fn stdout_json(o: &Output) -> Value {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    serde_json::from_slice(&o.stdout).expect("stdout is one JSON document")
}

fn stderr_json(o: &Output) -> Value {
    serde_json::from_slice(&o.stderr).expect("stderr is one JSON document")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// SBM bundle plus a trained model in a fresh directory.
fn setup() -> (tempfile::TempDir, std::path::PathBuf, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model.json");
    stdout_json(&etr(&[
        "gen-sbm",
        "--out",
        p(&data),
        "--nodes",
        "60",
        "--classes",
        "3",
        "--p-in",
        "0.2",
        "--p-out",
        "0.02",
        "--features",
        "8",
        "--seed",
        "1",
    ]));
    stdout_json(&etr(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&model),
        "--hidden",
        "16",
        "--epochs",
        "30",
    ]));
    (dir, data, model)
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn missing_data_is_a_usage_error() {
    let o = etr(&["train", "--out", "m.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn gen_sbm_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let v = stdout_json(&etr(&[
            "gen-sbm",
            "--out",
            p(out),
            "--nodes",
            "50",
            "--seed",
            "9",
        ]));
        assert_eq!(v["num_nodes"], 50);
    }
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn train_is_reproducible_and_reports_f1() {
    let (dir, data, model) = setup();
    let again = dir.path().join("again.json");
    let v = stdout_json(&etr(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&again),
        "--hidden",
        "16",
        "--epochs",
        "30",
    ]));
    assert!(v["train_f1"].as_f64().unwrap() > 0.5);
    assert!(v["test_f1"].is_number());
    assert_eq!(
        v["hyperparameter_source"]["learning_rate"],
        "toolkit default"
    );
    assert_eq!(fs::read(&model).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn unlearn_flows_and_exit_codes() {
    let (dir, data, model) = setup();
    let before_data = snapshot(&data);
    let before_model = fs::read(&model).unwrap();
    let req = dir.path().join("req.json");
    let out = dir.path().join("out.json");

    fs::write(&req, r#"{"kind":"node","ids":[]}"#).unwrap();
    let o = etr(&[
        "unlearn",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--request",
        p(&req),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr_json(&o)["error"], "validation");

    let train: Vec<usize> = fs::read_to_string(data.join("splits.csv"))
        .unwrap()
        .lines()
        .enumerate()
        .filter(|(_, t)| *t == "train")
        .map(|(i, _)| i)
        .take(3)
        .collect();
    fs::write(
        &req,
        serde_json::json!({"kind": "node", "ids": train}).to_string(),
    )
    .unwrap();

    let report = dir.path().join("report.json");
    let v = stdout_json(&etr(&[
        "unlearn",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--request",
        p(&req),
        "--out",
        p(&out),
        "--report",
        p(&report),
        "--check-gradient",
    ]));
    assert!(v["branch1_count"].as_u64().unwrap() > 0);
    assert!(v["grad_rd"].as_f64().unwrap().is_finite());
    assert_eq!(v["sizes"]["d_f"], 3);
    let saved: Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(saved, v);

    stdout_json(&etr(&[
        "unlearn",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--request",
        p(&req),
        "--out",
        p(&out),
        "--lambda",
        "0",
        "--m",
        "0",
    ]));
    let a: Value = serde_json::from_slice(&fs::read(&model).unwrap()).unwrap();
    let b: Value = serde_json::from_slice(&fs::read(&out).unwrap()).unwrap();
    assert_eq!(a["w0"], b["w0"]);
    assert_eq!(a["w1"], b["w1"]);

    let o = etr(&[
        "unlearn",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--request",
        p(&req),
        "--out",
        p(&model),
    ]);
    assert_eq!(o.status.code(), Some(1));

    let bare = dir.path().join("bare.json");
    let mut m = a.clone();
    m["grad_snapshot"] = Value::Null;
    fs::write(&bare, m.to_string()).unwrap();
    let o = etr(&[
        "unlearn",
        "--model",
        p(&bare),
        "--data",
        p(&data),
        "--request",
        p(&req),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr_json(&o)["remediation"].is_string());

    let o = etr(&[
        "unlearn",
        "--model",
        p(&model),
        "--data",
        "/nonexistent",
        "--request",
        p(&req),
        "--out",
        p(&out),
    ]);
    assert_eq!(o.status.code(), Some(3));

    assert_eq!(snapshot(&data), before_data);
    assert_eq!(fs::read(&model).unwrap(), before_model);
}

#[test]
fn divergence_exits_two() {
    let (dir, data, _) = setup();
    let out = dir.path().join("m.json");
    let o = etr(&[
        "train",
        "--data",
        p(&data),
        "--out",
        p(&out),
        "--hidden",
        "8",
        "--epochs",
        "50",
        "--lr",
        "1e12",
        "--force",
    ]);
    assert_eq!(
        o.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert_eq!(stderr_json(&o)["error"], "divergence");
}

#[test]
fn retrain_eval_and_audit() {
    let (dir, data, model) = setup();
    let req = dir.path().join("req.json");
    let splits = fs::read_to_string(data.join("splits.csv")).unwrap();
    let ids: Vec<usize> = splits
        .lines()
        .enumerate()
        .filter(|(_, t)| *t == "train")
        .map(|(i, _)| i)
        .take(4)
        .collect();
    fs::write(
        &req,
        serde_json::json!({"kind": "node", "ids": ids}).to_string(),
    )
    .unwrap();

    let retrained = dir.path().join("retrained.json");
    let v = stdout_json(&etr(&[
        "retrain",
        "--data",
        p(&data),
        "--request",
        p(&req),
        "--out",
        p(&retrained),
        "--hidden",
        "16",
        "--epochs",
        "30",
    ]));
    assert_eq!(v["request_size"], 4);

    let o = etr(&[
        "eval",
        "--data",
        p(&data),
        "--vanilla",
        p(&model),
        "--retrained",
        p(&model),
    ]);
    assert!(o.status.success());
    let csv = String::from_utf8(o.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("ratio,seed,method,f1,rms_dist,ad,rd,time_s")
    );
    for line in lines {
        assert_eq!(line.split(',').nth(4), Some("0"), "{line}");
    }

    let a = stdout_json(&etr(&[
        "audit",
        "--model",
        p(&model),
        "--retrained",
        p(&retrained),
        "--data",
        p(&data),
        "--request",
        p(&req),
    ]));
    for key in ["q", "rhs", "c1", "c2", "c3"] {
        assert!(a[key].as_f64().unwrap().is_finite(), "{key}");
    }
}

#[test]
fn attack_emits_csv_rows() {
    let (_dir, data, _) = setup();
    let o = etr_env(
        &[
            "attack",
            "--data",
            p(&data),
            "--ratios",
            "0,0.1",
            "--seeds",
            "0,1",
            "--hidden",
            "8",
            "--epochs",
            "20",
        ],
        "ETR_THREADS",
        "2",
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
    let o = etr_env(&["attack", "--data", p(&data)], "ETR_THREADS", "zero");
    assert_eq!(o.status.code(), Some(1));
}
