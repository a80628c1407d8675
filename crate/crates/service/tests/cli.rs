use std::path::Path;
use std::process::{Command, Output};

use fairloop_core::distillation::DecisionTree;
use serde_json::Value;

fn fairloop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairloop"))
        .current_dir(dir)
        .env_remove("FAIRLOOP_CONFIG")
        .args(["--config", "cfg.toml"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = fairloop(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn fail(dir: &Path, args: &[&str]) -> Value {
    let out = fairloop(dir, args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("not a JSON error line: {line}"))
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.toml"),
        "[defaults.model]\nhidden_layers = [8]\n[defaults.train]\nepochs = 5\nlearning_rate = 0.01\n[defaults.finetune]\nepochs = 2\n",
    )
    .unwrap();
    dir
}

#[test]
fn simulate_train_distill_pipeline() {
    let dir = workspace();
    let d = dir.path();
    let sim = ok(d, &["simulate", "--cases", "10", "--seed", "1", "-o", "log.xes"]);
    assert_eq!(sim["traces"], 10);
    let trained = ok(d, &["train", "--log", "log.xes", "-o", "bundle"]);
    assert_eq!(trained["iteration"], 0);
    for file in [
        "log.xes",
        "dataset.json",
        "model.json",
        "tree.json",
        "edits.json",
        "metrics.json",
        "state.json",
    ] {
        assert!(d.join("bundle").join(file).exists(), "{file}");
    }
    let distilled = ok(d, &["distill", "--bundle", "bundle", "-o", "tree.json"]);
    let text = std::fs::read_to_string(d.join("tree.json")).unwrap();
    let tree = DecisionTree::from_json(&text).unwrap();
    assert_eq!(distilled["nodes"], tree.node_count());
    assert_eq!(distilled["fidelity"], trained["fidelity"]);
    assert_eq!(text, std::fs::read_to_string(d.join("bundle/tree.json")).unwrap());

    let unlimited = ok(
        d,
        &[
            "distill",
            "--bundle",
            "bundle",
            "--unlimited-depth",
            "--min-samples-leaf",
            "1",
            "-o",
            "deep.json",
        ],
    );
    assert!(unlimited["nodes"].as_u64() >= distilled["nodes"].as_u64());
}

#[test]
fn empty_edit_list_keeps_the_tree() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["simulate", "--cases", "30", "--seed", "2", "-o", "log.xes"]);
    ok(d, &["train", "--log", "log.xes", "-o", "bundle"]);
    std::fs::write(d.join("none.json"), "[]").unwrap();
    ok(
        d,
        &["edit", "--bundle", "bundle", "--edits", "none.json", "-o", "same.json"],
    );
    assert_eq!(
        std::fs::read(d.join("same.json")).unwrap(),
        std::fs::read(d.join("bundle/tree.json")).unwrap()
    );
    ok(d, &["distill", "--bundle", "bundle", "-o", "tree.json"]);
    ok(
        d,
        &[
            "edit",
            "--bundle",
            "bundle",
            "--tree",
            "tree.json",
            "--edits",
            "none.json",
            "-o",
            "same2.json",
        ],
    );
    assert_eq!(
        std::fs::read(d.join("same2.json")).unwrap(),
        std::fs::read(d.join("tree.json")).unwrap()
    );
}

#[test]
fn iterate_metrics_and_export() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["simulate", "--cases", "40", "--seed", "3", "-o", "log.xes"]);
    ok(d, &["train", "--log", "log.xes", "-o", "b0"]);
    let tree = DecisionTree::from_json(&std::fs::read_to_string(d.join("b0/tree.json")).unwrap()).unwrap();
    let edits = match tree.nodes().iter().find(|n| !n.is_leaf()) {
        Some(n) => format!(r#"[{{"type": "remove", "node_id": {}}}]"#, n.id()),
        None => "[]".into(),
    };
    std::fs::write(d.join("edits.json"), edits).unwrap();
    let out = ok(d, &["iterate", "--bundle", "b0", "--edits", "edits.json", "-o", "b1"]);
    assert_eq!(out["iteration"], 1);
    let history = ok(d, &["metrics", "--bundle", "b1"]);
    assert_eq!(history.as_array().unwrap().len(), 2);
    ok(d, &["metrics", "--bundle", "b0", "-o", "m.json"]);
    let m: Value = serde_json::from_slice(&std::fs::read(d.join("m.json")).unwrap()).unwrap();
    assert_eq!(m.as_array().unwrap().len(), 1);
    ok(d, &["export", "--bundle", "b1", "-o", "export.json"]);
    let export: Value = serde_json::from_slice(&std::fs::read(d.join("export.json")).unwrap()).unwrap();
    assert_eq!(export["iteration"], 1);
    assert!(export["tree"]["nodes"].is_array());
}

#[test]
fn errors_are_structured_lines() {
    let dir = workspace();
    let d = dir.path();
    let err = fail(d, &["train", "--log", "missing.xes", "-o", "bundle"]);
    assert_eq!(err["error"], "io");

    std::fs::write(d.join("bad.xes"), "<log><trace>").unwrap();
    let err = fail(d, &["train", "--log", "bad.xes", "-o", "bundle"]);
    assert_eq!(err["error"], "malformed_xml");

    ok(d, &["simulate", "--cases", "10", "-o", "log.xes"]);
    ok(d, &["train", "--log", "log.xes", "-o", "bundle"]);
    std::fs::write(d.join("bad_edit.json"), r#"[{"type": "remove", "node_id": 4242}]"#).unwrap();
    let err = fail(
        d,
        &["edit", "--bundle", "bundle", "--edits", "bad_edit.json", "-o", "t.json"],
    );
    assert_eq!(err["error"], "unknown_node");
    assert_eq!(err["details"]["edit_index"], 0);

    std::fs::write(d.join("bundle/model.json"), "{").unwrap();
    let err = fail(d, &["metrics", "--bundle", "bundle"]);
    assert_eq!(err["error"], "corrupt_bundle");
    assert_eq!(err["details"]["component"], "model");

    let err = fail(d, &["simulate", "--refuse-female", "1.5", "-o", "x.xes"]);
    assert_eq!(err["error"], "invalid_probability");
}

#[test]
fn unknown_subcommand_prints_usage() {
    let dir = workspace();
    let out = fairloop(dir.path(), &["frobnicate"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "{stderr}");
}

#[test]
fn invalid_config_file_is_reported() {
    let dir = workspace();
    std::fs::write(dir.path().join("cfg.toml"), "addr = 5").unwrap();
    let err = fail(dir.path(), &["simulate", "--cases", "1", "-o", "log.xes"]);
    assert_eq!(err["error"], "invalid_config");
}
