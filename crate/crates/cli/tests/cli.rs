use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn write(root: &Path, rel: &str, text: &str) {
    let p = root.join(rel);
    fs::create_dir_all(p.parent().unwrap()).unwrap();
    fs::write(p, text).unwrap();
}

/// One feature plus an intercept column; record 9 sits left of the
/// boundary with label 1.
fn workspace(complaints: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut train = String::from("id,x0,x1,label\n");
    for i in 0..20 {
        let x = i as f64 / 4.0 - 2.5;
        let label = usize::from(x > 0.0 || i == 9);
        train.push_str(&format!("{i},{x},1,{label}\n"));
    }
    write(root, "data/train.csv", &train);
    write(root, "data/q.csv", "id,x0,x1\n0,-0.1,1\n1,-2,1\n2,2,1\n");
    write(
        root,
        "data/schema.json",
        r#"{"training": {"file": "train.csv", "classes": 2}, "relations": {"Q": {"file": "q.csv"}}}"#,
    );
    write(root, "queries/count.sql", "SELECT COUNT(*) FROM Q WHERE PREDICT(Q) = 1\n");
    write(root, "queries/rows.sql", "SELECT * FROM Q WHERE PREDICT(Q) = 1\n");
    write(root, "complaints.json", complaints);
    write(root, "session.json", r#"{"method": "holistic", "k_per_iteration": 1, "max_removals": 3}"#);
    dir
}

const COUNT_IS_ONE: &str =
    r#"[{"query": "count", "kind": "value", "target": {"group_key": []}, "attr": "COUNT(*)", "op": "=", "value": 1}]"#;

fn rain(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rain"))
        .arg("--workspace")
        .arg(root)
        .args(args)
        .output()
        .unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn run_query_prints_and_writes_the_count() {
    let ws = workspace("this is not json");
    let out = rain(ws.path(), &["run-query", "count"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout), "COUNT(*)\n2\n");
    assert_eq!(fs::read_to_string(ws.path().join("out/count.csv")).unwrap(), "COUNT(*)\n2\n");
    assert!(ws.path().join("out/model.json").is_file());
    // Second run reuses the cached model and gives the same answer.
    let again = rain(ws.path(), &["run-query", "count"]);
    assert_eq!(text(&again.stdout), "COUNT(*)\n2\n");
}

#[test]
fn missing_query_fails() {
    let ws = workspace(COUNT_IS_ONE);
    let out = rain(ws.path(), &["run-query", "nope"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("query not found"));
}

#[test]
fn debug_resolves_and_writes_reports() {
    let ws = workspace(COUNT_IS_ONE);
    let out = rain(ws.path(), &["debug"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("complaints resolved"), "{}", text(&out.stdout));
    let report: Value = serde_json::from_str(&fs::read_to_string(ws.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["delta"], serde_json::json!([9]));
    assert_eq!(report["resolved"], true);
    let ranking = fs::read_to_string(ws.path().join("out/ranking.csv")).unwrap();
    assert!(ranking.starts_with("iteration,rank,record_id,score\n0,1,9,"), "{ranking}");
}

#[test]
fn satisfied_complaints_need_nothing() {
    let ws = workspace(&COUNT_IS_ONE.replace("\"value\": 1", "\"value\": 2"));
    let out = rain(ws.path(), &["debug"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("nothing to fix"));
}

#[test]
fn auto_picks_twostep_for_an_unambiguous_complaint() {
    let ws = workspace(r#"[{"query": "rows", "kind": "prediction", "target": {"row_id": 0, "relation": "Q"}, "value": 0}]"#);
    let out = rain(ws.path(), &["debug", "--method", "auto"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(ws.path().join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "twostep");
}

#[test]
fn ilp_timeout_suggests_holistic() {
    let ws = workspace(COUNT_IS_ONE);
    let out = rain(ws.path(), &["debug", "--method", "twostep", "--ilp-budget", "1e-9"]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("ilp timeout") && err.contains("holistic"), "{err}");
}

#[test]
fn metrics_suite_matches_hand_computed_recall() {
    let ws = workspace(COUNT_IS_ONE);
    write(ws.path(), "bench/ranking.csv", "record_id\n5\n1\n7\n2\n");
    write(ws.path(), "bench/corrupted.json", "[1, 2, 3]");
    let out = rain(ws.path(), &["bench", "metrics", "--gnuplot"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    // r_1 = 0, r_2 = 1/3, r_3 = 1/3 and AUC = 2/3 (0 + 1/3 + 1/3) = 4/9.
    let csv = fs::read_to_string(ws.path().join("out/metrics.csv")).unwrap();
    let r: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(r.len(), 3);
    assert!((r[0]).abs() < 1e-15 && (r[1] - 1.0 / 3.0).abs() < 1e-15 && (r[2] - 1.0 / 3.0).abs() < 1e-15);
    let json: Value = serde_json::from_str(&fs::read_to_string(ws.path().join("out/metrics.json")).unwrap()).unwrap();
    assert!((json["auc"].as_f64().unwrap() - 4.0 / 9.0).abs() < 1e-12);
    assert!(ws.path().join("out/metrics.dat").is_file());
}

#[test]
fn appendix_a_suite_reports_one_in_ten() {
    let ws = workspace(COUNT_IS_ONE);
    write(ws.path(), "bench/appendix_a.json", r#"{"n": [10], "draws": 500}"#);
    let out = rain(ws.path(), &["bench", "appendix_a"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let json: Value = serde_json::from_str(&fs::read_to_string(ws.path().join("out/appendix_a.json")).unwrap()).unwrap();
    assert_eq!(json[0]["exact_fraction"], 0.1);
    assert!((json[0]["empirical_frequency"].as_f64().unwrap() - 0.1).abs() < 0.05);
}

#[test]
fn oracle_suite_finds_the_flipped_record() {
    let ws = workspace(COUNT_IS_ONE);
    let out = rain(ws.path(), &["bench", "oracle"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let json: Value = serde_json::from_str(&fs::read_to_string(ws.path().join("out/oracle.json")).unwrap()).unwrap();
    assert!(json.as_array().unwrap().contains(&serde_json::json!([9])));
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let ws = workspace(COUNT_IS_ONE);
    let out = rain(ws.path(), &["bench", "bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("usage: rain bench"));
}
