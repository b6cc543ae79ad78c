use std::fs;
use std::path::Path;
use std::process::Command;

use afpnet::ingest::{load_manifest, write_manifest};
use afpnet::synth::{reentrancy_corpus, SynthConfig};
use afpnet::MetricsReport;
use afpnet_cli::dispatch;
use serde_json::Value;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("afpnet").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

const MODEL: &str = r#"{"embed_dim": 8, "heights": [2, 3], "kernels_per_height": 4, "top_p": 3, "blocks": 1, "heads": 2}"#;
const TRAIN: &str = r#"{"learning_rate": 0.001, "epochs": 2, "batch_size": 8, "trials": 2, "min_freq": 1, "seed": 3}"#;

fn synthetic_manifest(dir: &Path, n: usize) -> std::path::PathBuf {
    let corpus = reentrancy_corpus(&SynthConfig {
        positives: n / 2,
        negatives: n / 2,
        seed: 1,
        ..Default::default()
    })
    .unwrap();
    let path = dir.join("manifest.jsonl");
    write_manifest(&corpus, &path).unwrap();
    path
}

fn train_run(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let manifest = synthetic_manifest(dir, 40);
    fs::write(dir.join("model.json"), MODEL).unwrap();
    fs::write(dir.join("train.json"), TRAIN).unwrap();
    let out = dir.join("run");
    let mut args = vec![
        "train",
        "--manifest",
        s(&manifest),
        "--vuln-type",
        "reentrancy",
        "--config",
        s(&dir.join("model.json")).to_owned().leak(),
        "--train-config",
        s(&dir.join("train.json")).to_owned().leak(),
        "--out",
        s(&out).to_owned().leak(),
    ];
    args.extend_from_slice(extra);
    assert_eq!(run(&args), 0);
    out
}

#[test]
fn usage_errors_exit_one() {
    let bin = env!("CARGO_BIN_EXE_afpnet");
    let out = Command::new(bin).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(bin).args(["dedup", "--bogus"]).output().unwrap().status.code(), Some(1));
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["bench", "--checkpoint", "x", "--out", "y", "--lengths", "a,b"]), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"id\": \"a\", \"source\": \"x\", \"vuln_type\": \"reentrancy\", \"label\": 7}\n").unwrap();
    assert_eq!(run(&["dedup", "--manifest", s(&bad), "--out", s(&dir.path().join("o"))]), 2);
    let missing = dir.path().join("none.ckpt");
    let input = dir.path().join("a.sol");
    fs::write(&input, "contract A {}").unwrap();
    assert_eq!(run(&["predict", "--checkpoint", s(&missing), "--input", s(&input)]), 2);
}

#[test]
fn dedup_writes_manifest_and_report() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.sol"), "contract A { uint x; } // v1").unwrap();
    fs::write(dir.path().join("b.sol"), "contract   A {\n uint x; }").unwrap();
    let rows = [
        r#"{"id": "a", "path": "a.sol", "vuln_type": "timestamp", "label": 1}"#,
        r#"{"id": "b", "path": "b.sol", "vuln_type": "timestamp", "label": 1}"#,
        r#"{"id": "c", "source": "contract C { }", "vuln_type": "timestamp", "label": 0}"#,
    ];
    let manifest = dir.path().join("manifest.jsonl");
    fs::write(&manifest, rows.join("\n")).unwrap();
    let before = fs::read(&manifest).unwrap();
    let out = dir.path().join("dedup");
    assert_eq!(run(&["dedup", "--manifest", s(&manifest), "--out", s(&out)]), 0);
    assert_eq!(fs::read(&manifest).unwrap(), before);

    let kept = load_manifest(out.join("manifest.jsonl")).unwrap();
    assert_eq!(kept.iter().map(|c| c.id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
    let report = read_json(&out.join("dedup_report.json"));
    assert_eq!(report["groups"][0]["survivor"], "a");
    assert_eq!(report["groups"][0]["removed"][0], "b");
    let rm = read_json(&out.join("run_manifest.json"));
    assert_eq!(rm["subcommand"], "dedup");
    assert!(rm["started_at"].is_string());
}

#[test]
fn train_then_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_run(dir.path(), &["--epochs", "3"]);
    for i in 0..2 {
        let trial = out.join(format!("trial{i}"));
        for f in ["model.ckpt", "vocab.json", "history.json", "metrics.json"] {
            assert!(trial.join(f).exists(), "missing {f}");
        }
        let history = read_json(&trial.join("history.json"));
        assert_eq!(history["epochs"].as_array().unwrap().len(), 3);
        let metrics_path = dir.path().join(format!("eval{i}.json"));
        let pca = dir.path().join(format!("pca{i}.csv"));
        assert_eq!(
            run(&[
                "evaluate",
                "--checkpoint",
                s(&trial.join("model.ckpt")),
                "--manifest",
                s(&out.join("test_manifest.jsonl")),
                "--out",
                s(&metrics_path),
                "--emit-pca",
                s(&pca),
            ]),
            0
        );
        let evaluated: MetricsReport = serde_json::from_value(read_json(&metrics_path)).unwrap();
        let recorded: MetricsReport = serde_json::from_value(history["final_metrics"].clone()).unwrap();
        assert_eq!(evaluated, recorded);
        assert_eq!(fs::read(&metrics_path).unwrap(), fs::read(trial.join("metrics.json")).unwrap());
        let csv = fs::read_to_string(&pca).unwrap();
        assert!(csv.starts_with("id,x,y,label\n"));
        assert_eq!(csv.lines().count(), 1 + load_manifest(out.join("test_manifest.jsonl")).unwrap().len());
        assert!(dir.path().join(format!("eval{i}.run.json")).exists());
    }
    let rm = read_json(&out.join("run_manifest.json"));
    // flag beats file, file beats default
    assert_eq!(rm["config"]["train"]["epochs"], 3);
    assert_eq!(rm["config"]["train"]["batch_size"], 8);
    assert_eq!(rm["config"]["train"]["weight_decay"], 0.01);
    assert_eq!(rm["seed"], 3);
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["trials"].as_array().unwrap().len(), 2);
}

#[test]
fn predict_explain_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_run(dir.path(), &["--trials", "1"]);
    let ckpt = out.join("trial0").join("model.ckpt");
    let input = dir.path().join("input.sol");
    let source = load_manifest(out.join("test_manifest.jsonl")).unwrap().contracts()[0].source.clone();
    fs::write(&input, &source).unwrap();

    let bin = env!("CARGO_BIN_EXE_afpnet");
    let res = Command::new(bin)
        .args(["predict", "--checkpoint", s(&ckpt), "--input", s(&input), "--attribution", "--dump-tokens"])
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0));
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.contains("probability ") && stdout.contains("decision ") && stdout.contains("top snippets"));
    let files_before = fs::read_dir(dir.path()).unwrap().count();

    let pred = dir.path().join("pred.json");
    assert_eq!(run(&["predict", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&pred)]), 0);
    let p = read_json(&pred);
    assert!(p["probability"].as_f64().unwrap() >= 0.0);
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), files_before + 2);

    let report = dir.path().join("report.html");
    assert_eq!(run(&["explain", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&report)]), 0);
    let html = fs::read_to_string(&report).unwrap();
    assert!(html.contains("<mark>") && html.starts_with("<!DOCTYPE html>"));
    let md = dir.path().join("report.md");
    assert_eq!(
        run(&["explain", "--checkpoint", s(&ckpt), "--input", s(&input), "--format", "markdown", "--out", s(&md)]),
        0
    );
    assert!(dir.path().join("report.run.json").exists());

    let bench = dir.path().join("bench.json");
    assert_eq!(
        run(&["bench", "--checkpoint", s(&ckpt), "--lengths", "20,40", "--repeats", "10", "--out", s(&bench)]),
        0
    );
    let b = read_json(&bench);
    assert_eq!(b["scaling"]["timings"].as_array().unwrap().len(), 2);
    assert_eq!(b["cost_models"][0]["n"], 20);
    assert_eq!(run(&["bench", "--checkpoint", s(&ckpt), "--lengths", "40,20", "--out", s(&bench)]), 2);
}
