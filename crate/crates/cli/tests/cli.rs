//! End-to-end checks of the `muie` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_muie");

const BOX: &str = "<UIE>\n(Trump, person)\n(Merkel, person)\n\u{22EF}\n<Module>\nImage Segmenter\n<Instruction>\nSegmentation: `A person'\n";

fn manifest() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/muie-9combo/manifest.jsonl")
}

fn muie(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn muie_stdin(args: &[&str], input: &[u8]) -> Output {
    let mut child = Command::new(BIN)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input).unwrap();
    child.wait_with_output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stub_backends(stub: &str) -> Vec<String> {
    let m = manifest();
    let cmd = format!("stdio:{BIN} stub {stub} --manifest {}", m.display());
    ["uie", "image_segmenter", "video_tracker", "audio_segmenter"]
        .iter()
        .map(|k| format!("{k}={cmd}"))
        .collect()
}

fn run_store(out: &Path, stub: &str, extra: &[&str]) -> Output {
    let m = manifest();
    let backends = stub_backends(stub);
    let mut args = vec![
        "run",
        "--manifest",
        m.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    for b in &backends {
        args.extend(["--backend", b.as_str()]);
    }
    args.extend(extra);
    muie(&args)
}

fn score_store(store: &Path, extra: &[&str]) -> Output {
    let m = manifest();
    let mut args = vec![
        "score",
        "--manifest",
        m.to_str().unwrap(),
        "--store",
        store.to_str().unwrap(),
    ];
    args.extend(extra);
    muie(&args)
}

#[test]
fn validate_accepts_the_fixture() {
    let o = muie(&["validate", manifest().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["instances"], 30);
}

#[test]
fn validate_reports_broken_gold() {
    let dir = tempfile::tempdir().unwrap();
    let src = manifest();
    let fixture_root = src.parent().unwrap();
    for sub in ["gold", "media"] {
        copy_dir(&fixture_root.join(sub), &dir.path().join(sub));
    }
    let lines: Vec<String> = fs::read_to_string(&src)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    let write_with_first = |edit: &dyn Fn(&mut Value)| {
        let mut lines = lines.clone();
        let mut first: Value = serde_json::from_str(&lines[1]).unwrap();
        edit(&mut first);
        lines[1] = first.to_string();
        let m = dir.path().join("manifest.jsonl");
        fs::write(&m, lines.join("\n") + "\n").unwrap();
        m
    };

    // declared media size disagrees with the gold masks
    let m = write_with_first(&|v| v["image"]["width"] = 9.into());
    let o = muie(&["validate", m.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let stderr = String::from_utf8(o.stderr).unwrap();
    let violations: Vec<Value> = stderr
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert!(!violations.is_empty());
    assert!(
        violations.iter().all(|v| v["code"] == "DIM_MISMATCH"),
        "{stderr}"
    );
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["instances"], 30);

    // a dangling gold reference fails before validation starts
    let m = write_with_first(&|v| v["gold"] = "gold/missing.json".into());
    let o = muie(&["validate", m.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(o.stdout.is_empty());
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let p = entry.unwrap().path();
        fs::copy(&p, to.join(p.file_name().unwrap())).unwrap();
    }
}

#[test]
fn parse_prints_the_box_as_json() {
    let o = muie_stdin(&["parse", "-", "--task", "ner"], BOX.as_bytes());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let text = v.to_string();
    assert!(text.contains("Trump") && text.contains("Merkel"), "{text}");
    assert!(text.contains("Image Segmenter"));
}

#[test]
fn parse_errors_are_json_with_offsets() {
    let o = muie_stdin(&["parse", "-", "--task", "ner"], b"no tags");
    assert_eq!(code(&o), 2);
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["code"], "PARSE_ERROR");
    assert_eq!(err["offset"], 7);
    assert!(o.stdout.is_empty());
}

#[test]
fn oracle_run_then_score_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let o = run_store(&store, "oracle", &["--jobs", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["instances"], 30);
    assert_eq!(summary["failed"], 0);

    let o = score_store(&store, &["--format", "table"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    let values: Vec<&str> = table
        .lines()
        .filter(|l| l.starts_with("score"))
        .flat_map(|l| l.split_whitespace().skip(1))
        .collect();
    assert!(!values.is_empty());
    assert!(values.iter().all(|v| *v == "100.0"), "{table}");

    // json report re-renders to the same table
    let o = score_store(&store, &["--format", "json"]);
    let report = dir.path().join("report.json");
    fs::write(&report, &o.stdout).unwrap();
    let o = muie(&[
        "report",
        "--in",
        report.to_str().unwrap(),
        "--format",
        "table",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8(o.stdout).unwrap(), table);
}

#[test]
fn failing_backend_gives_partial_exit() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest();
    let out = dir.path().join("store");
    let o = muie(&[
        "run",
        "--manifest",
        m.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--backend",
        "uie=stdio:sh -c 'cat > /dev/null'",
        "--timeout",
        "0.2",
        "--retries",
        "0",
        "--jobs",
        "8",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["failed"], 30);
    assert_eq!(summary["errors"]["TIMEOUT"], 30);

    // the store still scores; errored instances surface as report errors
    let o = score_store(&out, &["--format", "json"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(code(&muie(&["score"])), 1);
    assert_eq!(code(&muie(&["frobnicate"])), 1);
    let m = manifest();
    // a run with no uie backend is a configuration error
    let dir = tempfile::tempdir().unwrap();
    let o = muie(&[
        "run",
        "--manifest",
        m.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&muie(&["--help"])), 0);
}

#[test]
fn missing_manifest_is_an_input_error() {
    let o = muie(&["validate", "/nonexistent/manifest.jsonl"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    assert_eq!(code(&run_store(&store, "oracle", &["--jobs", "2"])), 0);

    let cfg = dir.path().join("muie.toml");
    fs::write(
        &cfg,
        "format = \"csv\"\nlabel = \"mine\"\nsplit = \"shared\"\n",
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap();

    let o = score_store(&store, &["--config", cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.starts_with("split,combo,"), "{csv}");
    assert!(csv.lines().skip(1).all(|l| l.starts_with("shared,")));

    let o = score_store(&store, &["--config", cfg, "--format", "table"]);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("\nmine "), "{table}");

    fs::write(dir.path().join("bad.toml"), "colour = \"blue\"\n").unwrap();
    let bad = dir.path().join("bad.toml");
    let o = score_store(&store, &["--config", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}

#[test]
fn corrupt_stub_lowers_scores() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let m = manifest();
    let cmd = format!(
        "stdio:{BIN} stub corrupt --percent 100 --manifest {}",
        m.display()
    );
    let backends: Vec<String> = ["uie", "image_segmenter", "video_tracker", "audio_segmenter"]
        .iter()
        .map(|k| format!("{k}={cmd}"))
        .collect();
    let mut args = vec![
        "run",
        "--manifest",
        m.to_str().unwrap(),
        "--out",
        store.to_str().unwrap(),
    ];
    for b in &backends {
        args.extend(["--backend", b.as_str()]);
    }
    assert_eq!(code(&muie(&args)), 0);
    let o = score_store(&store, &["--format", "json"]);
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    let cells = report["cells"].as_array().unwrap();
    assert!(!cells.is_empty());
    assert!(cells.iter().all(|c| c["value"] == 0.0));
}
