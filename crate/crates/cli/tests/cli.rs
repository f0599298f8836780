//! The `mvp` binary end to end on small inputs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mvp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvp")).args(args).env_remove("MVP_OUT_DIR").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_then_report_is_complete_and_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = mvp(&["simulate", "--top", "3", "--reps", "1", "--out", s(&dir)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dir
    };
    let (a, b) = (run("a"), run("b"));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 2019);
    assert!(manifest["finished-at"].as_u64() >= manifest["started-at"].as_u64(), "{manifest}");
    assert_eq!(manifest["summary"]["jobs"], 3 * 3 * 4);

    for f in fs::read_dir(a.join("records")).unwrap() {
        let name = f.unwrap().file_name();
        assert_eq!(fs::read(a.join("records").join(&name)).unwrap(), fs::read(b.join("records").join(&name)).unwrap());
    }

    let report = tmp.path().join("report");
    let out = mvp(&["report", "--in", s(&a), "--out", s(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "tables/crawl_sets.csv",
        "tables/abort_causes.csv",
        "figures/dead_end_histogram.csv",
        "figures/resource_types.csv",
        "figures/frame_origins.csv",
        "summary.json",
    ] {
        assert!(report.join(f).is_file(), "missing {f}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(report.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["ingest"]["malformed"], serde_json::json!([]), "{}", summary["ingest"]);
    assert_eq!(summary["ingest"]["orphans"], 0);
}

#[test]
fn empty_plan_is_a_successful_no_op() {
    let tmp = tempfile::tempdir().unwrap();
    let plan = tmp.path().join("plan.jsonl");
    fs::write(&plan, "").unwrap();
    let out = mvp(&["simulate", "--plan", s(&plan), "--out", s(&tmp.path().join("out"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_inputs_exit_with_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mvp(&["report", "--in", s(tmp.path()), "--filters", "/nonexistent/list.txt", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/list.txt"));

    let out = mvp(&["plan", "--domains", "/nonexistent/domains.csv", "--out", s(&tmp.path().join("p"))]);
    assert_eq!(out.status.code(), Some(2));
}
