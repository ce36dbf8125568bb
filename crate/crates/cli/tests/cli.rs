use std::path::PathBuf;
use std::process::{Command, Output};

fn corpus() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/corpus")
}

fn sonoscan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sonoscan"))
        .arg("--corpus-dir")
        .arg(corpus())
        .args(args)
        .env_remove("SONOSCAN_EMBED_ENDPOINT")
        .output()
        .unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn retrieval_table_formats() {
    let out = sonoscan(&["eval", "retrieval"]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.starts_with("Module  Model"));
    assert!(text.contains("UAR     hashing-d256  0.78      0.94      1.00"));

    let csv = stdout(&sonoscan(&["eval", "retrieval", "--format", "csv", "--ks", "1,10"]));
    assert_eq!(csv.lines().next(), Some("Module,Model,Recall@1,Recall@10"));

    let json: serde_json::Value =
        serde_json::from_str(&stdout(&sonoscan(&["eval", "retrieval", "--format", "json"]))).unwrap();
    assert_eq!(json["rows"][1]["module"], "RHR");
}

#[test]
fn run_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("trace.json");
    let transcript = corpus().join("transcripts/thyroid_scan.jsonl");
    let out = sonoscan(&[
        "run",
        "--instruction",
        "scan the patient's thyroid",
        "--region",
        "neck",
        "--backend",
        &format!("scripted:{}", transcript.display()),
        "--out",
        out_path.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out_path).unwrap()).unwrap();
    assert_eq!(trace["status"], "completed");
    assert_eq!(trace["turns"].as_array().unwrap().len(), 8);
    assert_eq!(trace["overall_ok"], true);
}

#[test]
fn index_build_writes_both_indexes() {
    let dir = tempfile::tempdir().unwrap();
    let out = sonoscan(&["index", "build", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    assert!(dir.path().join("apis.index.jsonl").is_file());
    assert!(dir.path().join("handbook.index.jsonl").is_file());
}

#[test]
fn exit_codes() {
    assert_eq!(sonoscan(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(sonoscan(&["eval", "execution", "--reps", "0"]).status.code(), Some(1));
    assert_eq!(sonoscan(&["--help"]).status.code(), Some(0));

    let missing = Command::new(env!("CARGO_BIN_EXE_sonoscan"))
        .args(["--corpus-dir", "/definitely/not/here", "eval", "retrieval"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(sonoscan(&["eval", "execution", "--backend", "scripted:/nope"]).status.code(), Some(2));

    let unreachable = sonoscan(&[
        "eval",
        "execution",
        "--reps",
        "1",
        "--backend",
        "remote:http://127.0.0.1:9/v1",
    ]);
    assert_eq!(unreachable.status.code(), Some(3));
    assert!(stdout(&unreachable).is_empty());
}
