use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn kmq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmq"))
        .args(args)
        .current_dir(dir)
        .env_remove("KMQ_STATE_DIR")
        .output()
        .expect("run kmq")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kmq(dir, args);
    assert!(
        out.status.success(),
        "kmq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn toy(dir: &Path) {
    write(
        dir,
        "toy.jsonl",
        concat!(
            "{\"id\":\"a\",\"embedding\":[0,0],\"quality\":0.9}\n",
            "{\"id\":\"b\",\"embedding\":[0,1],\"quality\":0.8}\n",
            "{\"id\":\"c\",\"embedding\":[10,0],\"quality\":0.2}\n",
            "{\"id\":\"d\",\"embedding\":[10,1],\"quality\":0.1}\n",
        ),
    );
}

/// Three tight groups; ids carry the group digit so a shell scorer can use it.
fn grouped(dir: &Path, with_quality: bool) {
    let mut body = String::new();
    for g in 0..3 {
        for i in 0..20 {
            let x = g as f64 * 50.0 + (i % 5) as f64 * 0.1;
            let y = (i / 5) as f64 * 0.1;
            let q = if with_quality {
                format!(",\"quality\":{}", 0.3 + 0.03 * i as f64)
            } else {
                String::new()
            };
            body.push_str(&format!("{{\"id\":\"g{g}-{i:02}\",\"embedding\":[{x},{y}]{q}}}\n"));
        }
    }
    write(dir, "grouped.jsonl", &body);
}

#[test]
fn diagnose_toy_matches_hand_silhouette() {
    let tmp = TempDir::new().unwrap();
    toy(tmp.path());
    ok(
        tmp.path(),
        &["--metric", "euclidean", "diagnose", "--corpus", "toy.jsonl", "--ks", "2", "--out", "d.json", "--csv", "d.csv"],
    );
    // Every point: a = 1, b = (10 + sqrt(101)) / 2, s = 1 - a / b.
    let b = (10.0 + 101f64.sqrt()) / 2.0;
    let expected = 1.0 - 1.0 / b;
    let doc = json(tmp.path().join("d.json"));
    let got = doc["report"]["entries"][0]["silhouette"].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert!(got > 0.9);
    assert!(doc["corpus_sha256"].as_str().unwrap().len() == 64);
    assert_eq!(doc["run_config"]["ks"], serde_json::json!([2]));
    let csv = fs::read_to_string(tmp.path().join("d.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("k,objective,silhouette"));
    assert!(lines[1].starts_with("2,"));
}

#[test]
fn diagnose_with_one_cluster_fails() {
    let tmp = TempDir::new().unwrap();
    toy(tmp.path());
    let out = kmq(tmp.path(), &["diagnose", "--corpus", "toy.jsonl", "--ks", "1"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("silhouette"));
    let out = kmq(tmp.path(), &["diagnose", "--corpus", "toy.jsonl", "--ks", "3,2"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn diagnose_json_output_parses() {
    let tmp = TempDir::new().unwrap();
    toy(tmp.path());
    let stdout = ok(
        tmp.path(),
        &["--metric", "euclidean", "--format", "json", "diagnose", "--corpus", "toy.jsonl", "--ks", "2,3"],
    );
    let v: Value = serde_json::from_str(&stdout).unwrap();
    let entries = v["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 2);
    let best = if entries[0]["silhouette"].as_f64() >= entries[1]["silhouette"].as_f64() { 2 } else { 3 };
    assert_eq!(v["recommended_k"], best);
}

fn trajectory(doc: &Value, j: usize) -> Vec<f64> {
    doc["report"]["weight_trajectory"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| w[j].as_f64().unwrap())
        .collect()
}

/// Shift-by-minimum plus proportional reweighting, applied to noiseless
/// constant per-cluster scores.
fn closed_form(deltas: &[f64], updates: usize) -> Vec<Vec<f64>> {
    let k = deltas.len();
    let min = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let max = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let eps = 1e-6 * (max - min + 1.0);
    let s: Vec<f64> = deltas.iter().map(|d| d - min + eps).collect();
    let mut w = vec![1.0 / k as f64; k];
    let mut all = vec![w.clone()];
    for _ in 0..updates {
        let dot: f64 = w.iter().zip(&s).map(|(a, b)| a * b).sum();
        w = w.iter().zip(&s).map(|(a, b)| a * b / dot).collect();
        all.push(w.clone());
    }
    all
}

#[test]
fn simulate_favoured_cluster_follows_recursion() {
    let tmp = TempDir::new().unwrap();
    ok(
        tmp.path(),
        &["simulate", "--budget", "120", "--no-weight-cap", "--out", "sim.json"],
    );
    let doc = json(tmp.path().join("sim.json"));
    let w2 = trajectory(&doc, 1);
    assert_eq!(w2.len(), 4);
    let oracle = closed_form(&[0.1, 1.0, 0.1, 0.1], 2);
    for (t, w) in oracle.iter().enumerate() {
        for j in 0..4 {
            let got = doc["report"]["weight_trajectory"][t][j].as_f64().unwrap();
            assert!((got - w[j]).abs() < 1e-9, "t={t} j={j}: {got} vs {}", w[j]);
        }
    }
    assert!(w2[0] < w2[1] && w2[1] < w2[2], "{w2:?}");
    // The last iteration draws but nothing is scored after it.
    assert_eq!(w2[3], w2[2]);
    let rows = doc["report"]["iterations"].as_array().unwrap();
    let favoured: u64 = rows.iter().map(|r| r["per_cluster_budget"][1].as_u64().unwrap()).sum();
    assert!(favoured as f64 > 120.0 / 4.0, "{favoured}");
}

#[test]
fn simulate_capped_trajectory_is_monotone() {
    let tmp = TempDir::new().unwrap();
    ok(tmp.path(), &["simulate", "--budget", "120", "--out", "sim.json"]);
    let doc = json(tmp.path().join("sim.json"));
    let w2 = trajectory(&doc, 1);
    assert!(w2[0] < w2[1] && w2[1] < w2[2], "{w2:?}");
    for t in 1..w2.len() {
        for j in 0..4 {
            let prev = doc["report"]["weight_trajectory"][t - 1][j].as_f64().unwrap();
            let next = doc["report"]["weight_trajectory"][t][j].as_f64().unwrap();
            assert!(next <= prev * 4.0 + 1e-12 && next >= prev / 4.0 - 1e-12);
        }
    }
}

#[test]
fn simulate_constant_scorer_keeps_uniform_weights() {
    let tmp = TempDir::new().unwrap();
    ok(
        tmp.path(),
        &["simulate", "--deltas", "0.5,0.5,0.5,0.5", "--budget", "100", "--out", "sim.json"],
    );
    let doc = json(tmp.path().join("sim.json"));
    for w in doc["report"]["final_weights"].as_array().unwrap() {
        assert!((w.as_f64().unwrap() - 0.25).abs() < 1e-12);
    }
}

#[test]
fn simulate_cumulative_sizes_for_three_iterations() {
    let tmp = TempDir::new().unwrap();
    ok(
        tmp.path(),
        &["simulate", "--per-cluster", "5000", "--dim", "4", "--budget", "10000", "--out", "sim.json"],
    );
    let doc = json(tmp.path().join("sim.json"));
    let cumulative: Vec<u64> = doc["report"]["iterations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["cumulative_selected"].as_u64().unwrap())
        .collect();
    assert_eq!(cumulative, vec![3334, 6667, 10000]);
    assert_eq!(doc["report"]["selected"], 10000);
}

#[test]
fn sample_is_deterministic_and_carries_provenance() {
    let tmp = TempDir::new().unwrap();
    grouped(tmp.path(), true);
    let args = ["--metric", "euclidean", "sample", "--corpus", "grouped.jsonl", "--k", "3", "--budget", "9", "--out"];
    let mut a = args.to_vec();
    a.push("a.json");
    let mut b = args.to_vec();
    b.push("b.json");
    ok(tmp.path(), &a);
    ok(tmp.path(), &b);
    let sa = json(tmp.path().join("a.json"));
    let sb = json(tmp.path().join("b.json"));
    assert_eq!(sa["ids"], sb["ids"]);
    assert_eq!(sa["corpus_sha256"], sb["corpus_sha256"]);
    assert_eq!(sa["params"]["corpus_sha256"].as_str().unwrap().len(), 64);
    assert_eq!(sa["params"]["run_config"]["budget"], 9);
    assert_eq!(sa["params"]["run_config"]["command"], "sample");
    // Three equal clusters, nine picks: three from each group.
    let ids: Vec<&str> = sa["ids"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(ids.len(), 9);
    for g in ["g0-", "g1-", "g2-"] {
        assert_eq!(ids.iter().filter(|id| id.starts_with(g)).count(), 3);
    }
}

#[test]
fn saved_clustering_reproduces_sample() {
    let tmp = TempDir::new().unwrap();
    grouped(tmp.path(), true);
    ok(
        tmp.path(),
        &["--metric", "euclidean", "cluster", "--corpus", "grouped.jsonl", "--k", "3", "--out", "c.json"],
    );
    let c = json(tmp.path().join("c.json"));
    assert_eq!(c["provenance"]["run_config"]["command"], "cluster");
    ok(
        tmp.path(),
        &["--metric", "euclidean", "sample", "--corpus", "grouped.jsonl", "--k", "3", "--budget", "7", "--out", "a.json"],
    );
    ok(
        tmp.path(),
        &["--metric", "euclidean", "sample", "--corpus", "grouped.jsonl", "--clustering", "c.json", "--budget", "7", "--out", "b.json"],
    );
    assert_eq!(json(tmp.path().join("a.json"))["ids"], json(tmp.path().join("b.json"))["ids"]);
}

#[test]
fn every_static_method_runs() {
    let tmp = TempDir::new().unwrap();
    grouped(tmp.path(), true);
    for method in ["random", "kcenter", "km-closest", "km-random", "kmq"] {
        ok(
            tmp.path(),
            &["sample", "--corpus", "grouped.jsonl", "--method", method, "--k", "3", "--budget", "6", "--out", "s.json"],
        );
        let s = json(tmp.path().join("s.json"));
        assert_eq!(s["method"], method);
        assert_eq!(s["ids"].as_array().unwrap().len(), 6);
    }
}

#[test]
fn data_and_config_errors_have_distinct_exit_codes() {
    let tmp = TempDir::new().unwrap();
    grouped(tmp.path(), false);
    // kMQ needs qualities.
    let out = kmq(tmp.path(), &["sample", "--corpus", "grouped.jsonl", "--k", "3", "--budget", "6", "--out", "s.json"]);
    assert_eq!(code(&out), 3);
    let mut scores = String::new();
    for g in 0..3 {
        for i in 0..20 {
            scores.push_str(&format!("{{\"id\":\"g{g}-{i:02}\",\"quality\":0.5}}\n"));
        }
    }
    write(tmp.path(), "scores.jsonl", &scores);
    ok(
        tmp.path(),
        &["sample", "--corpus", "grouped.jsonl", "--scores", "scores.jsonl", "--k", "3", "--budget", "6", "--out", "s.json"],
    );

    write(
        tmp.path(),
        "bad.jsonl",
        "{\"id\":\"a\",\"embedding\":[0,0]}\n{\"id\":\"b\",\"embedding\":[0,0,1]}\n",
    );
    let out = kmq(tmp.path(), &["cluster", "--corpus", "bad.jsonl", "--k", "1", "--out", "c.json"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains('b'));

    let out = kmq(tmp.path(), &["sample", "--corpus", "grouped.jsonl", "--method", "random", "--budget", "0", "--out", "s.json"]);
    assert_eq!(code(&out), 2);
    let out = kmq(tmp.path(), &["sample", "--corpus", "grouped.jsonl", "--method", "random", "--budget", "61", "--out", "s.json"]);
    assert_ne!(code(&out), 0);
}

const SCORER: &str = r#"#!/bin/sh
# Delta of an instance is the digit after "g" in its id.
case "$1" in
  *requests_2*) [ -e fail ] && exit 7 ;;
esac
awk -F'"' '{ printf "{\"id\":\"%s\",\"gen_score\":0,\"gold_score\":%s}\n", $4, substr($4, 2, 1) }' "$1" > "$2"
"#;

fn scorer_dir() -> TempDir {
    let tmp = TempDir::new().unwrap();
    grouped(tmp.path(), true);
    let script = write(tmp.path(), "score.sh", SCORER);
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(&script, fs::Permissions::from_mode(0o755)).unwrap();
    }
    tmp
}

const ITERATE: &[&str] = &[
    "--metric",
    "euclidean",
    "iterate",
    "--corpus",
    "grouped.jsonl",
    "--k",
    "3",
    "--budget",
    "30",
    "--iterations",
    "3",
    "--scorer-command",
    "./score.sh",
];

#[cfg(unix)]
#[test]
fn interrupted_iterate_resumes_to_the_same_result() {
    let full = scorer_dir();
    let mut args = ITERATE.to_vec();
    args.extend(["--state-dir", "state", "--out", "sel.json"]);
    ok(full.path(), &args);

    let cut = scorer_dir();
    write(cut.path(), "fail", "");
    let out = kmq(cut.path(), &args);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("kmq resume"));
    assert!(cut.path().join("state/iter_1.json").exists());
    assert!(!cut.path().join("sel.json").exists());
    // A second start in the same directory is refused.
    assert_eq!(code(&kmq(cut.path(), &args)), 3);

    fs::remove_file(cut.path().join("fail")).unwrap();
    ok(cut.path(), &["resume", "--state-dir", "state"]);

    let a = fs::read(full.path().join("sel.json")).unwrap();
    let b = fs::read(cut.path().join("sel.json")).unwrap();
    assert_eq!(a, b);
    for name in ["iter_1.json", "iter_2.json", "iter_3.json", "weights.json"] {
        assert_eq!(
            fs::read(full.path().join("state").join(name)).unwrap(),
            fs::read(cut.path().join("state").join(name)).unwrap(),
            "{name}"
        );
    }
    let sel = json(full.path().join("sel.json"));
    assert_eq!(sel["method"], "iterative-kmq");
    assert_eq!(sel["ids"].as_array().unwrap().len(), 30);
    assert_eq!(sel["params"]["run_config"]["command"], "iterate");
    // Group 2 scores highest, so it gets more than its proportional share.
    let g2 = sel["ids"].as_array().unwrap().iter().filter(|v| v.as_str().unwrap().starts_with("g2-")).count();
    assert!(g2 > 10, "{g2}");
}

#[cfg(unix)]
#[test]
fn state_dir_can_come_from_the_environment() {
    let tmp = scorer_dir();
    let mut args = ITERATE.to_vec();
    args.extend(["--out", "sel.json"]);
    let run = |a: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_kmq"))
            .args(a)
            .current_dir(tmp.path())
            .env("KMQ_STATE_DIR", "envstate")
            .output()
            .unwrap()
    };
    let out = run(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("envstate/run.json").exists());
    assert!(tmp.path().join("envstate/cli.json").exists());
    // Resuming a finished run replays it and writes the same selection.
    let first = fs::read(tmp.path().join("sel.json")).unwrap();
    let out = run(&["resume", "--out", "again.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(first, fs::read(tmp.path().join("again.json")).unwrap());
}

#[cfg(unix)]
#[test]
fn failing_scorer_without_state_exits_four() {
    let tmp = scorer_dir();
    write(tmp.path(), "fail", "");
    let mut args = ITERATE.to_vec();
    args.extend(["--out", "sel.json"]);
    assert_eq!(code(&kmq(tmp.path(), &args)), 4);
}

#[test]
fn file_scorer_iterate() {
    let tmp = TempDir::new().unwrap();
    grouped(tmp.path(), true);
    let mut responses = String::new();
    for g in 0..3 {
        for i in 0..20 {
            responses.push_str(&format!(
                "{{\"id\":\"g{g}-{i:02}\",\"gen_score\":0.0,\"gold_score\":{}}}\n",
                if g == 0 { 1.0 } else { 0.0 }
            ));
        }
    }
    write(tmp.path(), "resp.jsonl", &responses);
    let stdout = ok(
        tmp.path(),
        &[
            "--metric", "euclidean", "--format", "json", "iterate", "--corpus", "grouped.jsonl", "--k", "3", "--budget",
            "30", "--scorer-file", "resp.jsonl", "--out", "sel.json",
        ],
    );
    let v: Value = serde_json::from_str(&stdout).unwrap();
    assert_eq!(v["selected"], 30);
    let sel = json(tmp.path().join("sel.json"));
    let g0 = sel["ids"].as_array().unwrap().iter().filter(|v| v.as_str().unwrap().starts_with("g0-")).count();
    assert!(g0 > 10, "{g0}");
}
