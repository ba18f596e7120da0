use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const HEADER: &str = "anger,disgust,fear,happiness,sadness,surprise";

fn assets() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/assets")
}

fn mer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mer")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn infer(fixture: &str, extra: &[&str]) -> Output {
    let input = assets().join("fixtures").join(fixture);
    let model = assets().join("reference_model");
    let thresholds = assets().join("thresholds.json");
    let mut args = vec!["infer", "--input", s(&input), "--model", s(&model), "--thresholds", s(&thresholds)];
    args.extend_from_slice(extra);
    mer(&args)
}

#[test]
fn segment_finds_spans() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("spans.json");
    let o = mer(&["segment", "--input", s(&assets().join("fixtures/one_utt")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).trim(), "1 span(s)");
    let spans: Vec<Value> = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(spans.len(), 1);

    let o = mer(&["segment", "--input", s(&assets().join("fixtures/silence/audio.wav")), "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(&out).unwrap().trim(), "[]");
}

#[test]
fn segment_missing_input_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mer(&["segment", "--input", "/does/not/exist", "--out", s(&tmp.path().join("x.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("does not exist"));
}

#[test]
fn segment_bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"not_a_field": true}"#).unwrap();
    let o = mer(&[
        "segment",
        "--input",
        s(&assets().join("fixtures/one_utt")),
        "--config",
        s(&cfg),
        "--out",
        s(&tmp.path().join("x.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn infer_matches_golden_on_stdout_and_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("events.ndjson");
    let golden = fs::read_to_string(assets().join("golden/two_utt.ndjson")).unwrap();
    let o = infer("two_utt", &["--out", s(&out), "--stdout"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o), golden);
    assert_eq!(fs::read_to_string(&out).unwrap(), golden);
}

#[test]
fn infer_silence_emits_only_final() {
    let o = infer("silence", &[]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 1);
    let ev: Value = serde_json::from_str(text.trim()).unwrap();
    assert_eq!(ev["type"], "final");
    assert_eq!(ev["status"], "no_speech");
}

#[test]
fn infer_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let o = infer("one_utt", &["--artifacts", s(tmp.path())]);
    assert!(o.status.success());
    assert!(tmp.path().join("0/audio.wav").is_file());
    assert!(tmp.path().join("0/faces/0.png").is_file());
}

#[test]
fn corrupted_manifest_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let model = tmp.path().join("model");
    fs::create_dir(&model).unwrap();
    for f in ["config.json", "manifest.json", "weights.bin", "vocab.json"] {
        fs::copy(assets().join("reference_model").join(f), model.join(f)).unwrap();
    }
    let manifest = fs::read_to_string(model.join("manifest.json")).unwrap();
    fs::write(model.join("manifest.json"), manifest.replacen("\"fus.", "\"bogus.", 1)).unwrap();
    let o = mer(&[
        "infer",
        "--input",
        s(&assets().join("fixtures/one_utt")),
        "--model",
        s(&model),
        "--thresholds",
        s(&assets().join("thresholds.json")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("manifest mismatch"), "{}", stderr(&o));
}

#[test]
fn json_errors() {
    let o = mer(&["--json", "segment", "--input", "/nope", "--out", "/tmp/never.json"]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_str(stderr(&o).trim()).unwrap();
    assert_eq!(err["code"], 1);
    assert!(err["error"].as_str().unwrap().contains("/nope"));
}

#[test]
fn version_flag() {
    let o = mer(&["--version"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("mer "));
}

fn write_csv(path: &Path, header: &str, rows: &[[f64; 6]]) {
    let mut text = format!("{header}\n");
    for r in rows {
        let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
        text.push_str(&cells.join(","));
        text.push('\n');
    }
    fs::write(path, text).unwrap();
}

#[test]
fn calibrate_worked_example() {
    let tmp = tempfile::tempdir().unwrap();
    let (probs, labels, out) = (tmp.path().join("p.csv"), tmp.path().join("l.csv"), tmp.path().join("t.json"));
    let col = [0.2, 0.4, 0.6, 0.8];
    let lab = [0.0, 1.0, 1.0, 0.0];
    write_csv(&probs, HEADER, &col.map(|p| [p; 6]));
    write_csv(&labels, HEADER, &lab.map(|l| [l, 0.0, l, 0.0, l, 0.0]));
    let o = mer(&["calibrate", "--probs", s(&probs), "--labels", s(&labels), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let result: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(result["thresholds"], serde_json::json!([0.2, 0.01, 0.2, 0.01, 0.2, 0.01]));
    approx::assert_abs_diff_eq!(result["best_f1"][0].as_f64().unwrap(), 0.8, epsilon = 1e-12);
    let saved: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(saved["thresholds"], result["thresholds"]);
}

#[test]
fn calibrate_rejects_five_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let (probs, labels) = (tmp.path().join("p.csv"), tmp.path().join("l.csv"));
    fs::write(&probs, "anger,disgust,fear,happiness,sadness\n0.1,0.2,0.3,0.4,0.5\n").unwrap();
    write_csv(&labels, HEADER, &[[0.0; 6]]);
    let o = mer(&["calibrate", "--probs", s(&probs), "--labels", s(&labels), "--out", s(&tmp.path().join("t.json"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_perfect_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let (probs, labels, thr) = (tmp.path().join("p.csv"), tmp.path().join("l.csv"), tmp.path().join("t.json"));
    write_csv(&probs, HEADER, &[[0.9, 0.1, 0.9, 0.1, 0.9, 0.1], [0.1, 0.9, 0.1, 0.9, 0.1, 0.9]]);
    write_csv(&labels, HEADER, &[[1.0, 0.0, 1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0, 0.0, 1.0]]);
    fs::write(&thr, fs::read_to_string(assets().join("thresholds.json")).unwrap()).unwrap();
    let o = mer(&["eval", "--probs", s(&probs), "--labels", s(&labels), "--thresholds", s(&thr)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["mean_accuracy"], 1.0);
    assert_eq!(report["mean_f1_weighted"], 1.0);
}

#[test]
fn gen_fixture_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let o = mer(&["gen-fixture", "--kind", "two-utt", "--out", s(dir), "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for rel in ["audio.wav", "frames.json", "transcript.json", "frames/000007.png"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn train_head_reaches_target_f1() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("model");
    let o = mer(&["train-head", "--out", s(&out), "--group-lr-scale", "conv.txt=0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(summary["f1_weighted"].as_f64().unwrap() >= 0.95, "{summary}");
    assert!(summary["final_loss"].as_f64().unwrap() < 0.25 * summary["initial_loss"].as_f64().unwrap());
    for f in ["config.json", "manifest.json", "weights.bin", "thresholds.json", "loss_trace.json", "train_probs.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let trace: Vec<f64> = serde_json::from_str(&fs::read_to_string(out.join("loss_trace.json")).unwrap()).unwrap();
    assert_eq!(trace.len(), 201);

    let o = mer(&["train-head", "--out", s(&out), "--group-lr-scale", "nonsense=1"]);
    assert_eq!(o.status.code(), Some(1));
}
