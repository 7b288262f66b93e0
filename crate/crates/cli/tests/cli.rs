use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gam")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    gam(args).status.code().unwrap()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn synth(dir: &Path, seed: &str) -> (String, String) {
    let model = path(dir, &format!("m{seed}.gamm"));
    let queries = path(dir, &format!("q{seed}.gamq"));
    let out = gam(&["synth", "--seed", seed, "--points", "120", "--images", "10", "--n-queries", "3", "--out", &model, "--queries-out", &queries]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (model, queries)
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["localize", "--model", "x.gamm"]), 1);
    assert_eq!(code(&["synth", "--seed", "not-a-number", "--out", "x"]), 1);
    let dir = tempfile::tempdir().unwrap();
    let (model, queries) = synth(dir.path(), "1");
    // Neither --params nor --baseline.
    assert_eq!(code(&["localize", "--model", &model, "--query", &queries, "--out", &path(dir.path(), "r.json")]), 1);
}

#[test]
fn help_exits_0() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train", "--help"]), 0);
}

#[test]
fn unreadable_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let junk = path(dir.path(), "junk.gamm");
    std::fs::write(&junk, "GAMM 1\nthis is not a model\n").unwrap();
    assert_eq!(code(&["inspect", &junk]), 2);
    assert_eq!(code(&["inspect", &path(dir.path(), "missing.bmn")]), 2);
    let (_, queries) = synth(dir.path(), "1");
    let out = path(dir.path(), "r.json");
    assert_eq!(code(&["localize", "--model", &junk, "--baseline", "ratio", "--query", &queries, "--out", &out]), 2);
}

#[test]
fn unrelated_scene_exits_3_with_failure_json() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = synth(dir.path(), "1");
    let (_, other) = synth(dir.path(), "2");
    let out = path(dir.path(), "r.json");
    assert_eq!(code(&["localize", "--model", &model, "--baseline", "ratio", "--query", &other, "--out", &out]), 3);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(json["status"], "failed");
    assert!(json["qw"].is_null());
}

#[test]
fn baseline_localizes_own_scene() {
    let dir = tempfile::tempdir().unwrap();
    let (model, queries) = synth(dir.path(), "3");
    let out = path(dir.path(), "e.json");
    assert_eq!(code(&["eval", "--model", &model, "--baseline", "ratio", "--queries", &queries, "--out", &out]), 0);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(json.is_object());
}

#[test]
fn inspect_reports_each_format() {
    let dir = tempfile::tempdir().unwrap();
    let (model, queries) = synth(dir.path(), "4");
    let params: PathBuf = dir.path().join("p.bmn");
    let p = params.to_string_lossy();
    assert_eq!(
        code(&["train", "--models", &model, "--epochs", "1", "--width", "4", "--point-blocks", "1", "--edge-blocks", "1", "--n2d", "32", "--n3d", "64", "--out", &p]),
        0
    );
    for file in [model.as_str(), queries.as_str(), &p] {
        let out = gam(&["inspect", file]);
        assert!(out.status.success(), "{file}");
        assert!(!out.stdout.is_empty());
    }
}
