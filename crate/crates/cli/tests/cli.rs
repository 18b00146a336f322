use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_waveletnet"));
    c.env_remove("WAVELETNET_DATA");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn schema(name: &str) -> jsonschema::Validator {
    let text = std::fs::read_to_string(repo().join("docs/schemas").join(name)).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn assert_valid(schema_file: &str, value: &Value) {
    let v = schema(schema_file);
    let errors: Vec<String> = v.iter_errors(value).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{schema_file}: {errors:?}");
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "stdout is not JSON ({e}): {}",
            String::from_utf8_lossy(&out.stdout)
        )
    })
}

#[test]
fn report_defaults_validate_and_summarize() {
    let out = run(&["report"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_valid("complexity.v1.json", &v);
    assert_eq!(v["total_params"], 2_721_272);
    assert_eq!(v["head_readings"][0]["head"], "dense");
    assert!(String::from_utf8_lossy(&out.stderr).contains("2.721M params"));
}

#[test]
fn report_variants() {
    let v = json(&run(&["report", "--width", "0.75", "--json"]));
    assert_valid("complexity.v1.json", &v);
    assert_eq!(v["total_params"], 1_789_104);
    let v = json(&run(&["report", "--kappa", "5"]));
    assert_eq!(v["clamped"].as_array().unwrap().len(), 4);
    let v = json(&run(&["report", "--head", "wconv"]));
    assert_eq!(v["head"], "wconv");
    assert_eq!(v["head_readings"][1]["head"], "dense");
    let v = json(&run(&["report", "--model", "cifar", "--M", "24"]));
    assert_valid("complexity.v1.json", &v);
    assert_eq!(v["conv_layers"], 218);
    let v = json(&run(&[
        "report",
        "--config",
        repo().join("configs/imagenet.json").to_str().unwrap(),
    ]));
    assert_eq!(v["total_params"], 2_721_272);
}

#[test]
fn report_usage_errors_exit_2() {
    for args in [
        &["report", "--M", "3"][..],
        &["report", "--model", "cifar", "--head", "wconv"],
        &["report", "--kappa", "5", "--strict"],
        &["report", "--width", "-1"],
        &["report", "--config", "/nonexistent.json"],
        &["report", "--model", "resnet"],
        &["bogus"],
    ] {
        let out = run(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(out.stdout.is_empty(), "{args:?}");
    }
}

#[test]
fn haar_outputs() {
    let out = run(&["haar", "--d", "8", "--kappa", "3", "--sign", "matrix"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<Vec<i32>> = text
        .lines()
        .map(|l| l.split_whitespace().map(|t| t.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows[0], vec![1, 0, 0, 0, -1, 0, 0, 0]);
    assert_eq!(rows[6], vec![1, -1, 1, -1, 1, -1, 1, -1]);
    assert_eq!(rows[7], vec![1; 8]);

    let v = json(&run(&[
        "haar", "--d", "4", "--kappa", "2", "--format", "json",
    ]));
    assert_valid("haar.v1.json", &v);
    assert_eq!(
        v["rows"],
        serde_json::json!([[-1, 0, 1, 0], [0, -1, 0, 1], [-1, 1, -1, 1], [1, 1, 1, 1]])
    );

    assert_eq!(run(&["haar", "--d", "6"]).status.code(), Some(2));
    assert_eq!(
        run(&["haar", "--d", "8", "--kappa", "4"]).status.code(),
        Some(2)
    );
}

#[test]
fn verify_suites() {
    let out = run(&["verify", "--suite", "connectivity"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_valid("verify.v1.json", &v);
    assert_eq!(v["passed"], true);
    assert!(String::from_utf8_lossy(&out.stderr)
        .lines()
        .any(|l| l.starts_with("PASS connectivity/")));

    let out = run(&["verify", "--suite", "all"]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_valid("verify.v1.json", &json(&out));
}

#[test]
fn corrupted_haar_fails_the_oracle_suite() {
    let out = run(&["verify", "--suite", "oracle", "--corrupt-haar", "2,5"]);
    assert_eq!(out.status.code(), Some(1));
    let v = json(&out);
    assert_valid("verify.v1.json", &v);
    assert_eq!(v["passed"], false);
    let failing: Vec<&str> = v["properties"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|p| p["passed"] == false)
        .map(|p| p["name"].as_str().unwrap())
        .collect();
    assert!(failing.contains(&"haar_reference_d8"), "{failing:?}");
    assert_eq!(
        run(&["verify", "--corrupt-haar", "9,0"]).status.code(),
        Some(2)
    );
}

#[test]
fn short_training_run_writes_a_valid_log() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.jsonl");
    let out = run(&[
        "train",
        "--steps",
        "30",
        "--seed",
        "1",
        "--out",
        log.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = json(&out);
    assert_valid("train.v1.json", &v);
    assert_eq!(v["runs"][0]["steps"], 30);
    let text = std::fs::read_to_string(&log).unwrap();
    assert!(!text.is_empty());
    for line in text.lines() {
        assert_valid("train-log.v1.json", &serde_json::from_str(line).unwrap());
    }
}

#[test]
fn short_pair_reports_the_gap() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("pair.jsonl");
    let out = run(&[
        "train",
        "--pair",
        "--steps",
        "20",
        "--out",
        log.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_valid("train.v1.json", &v);
    let gap = v["without_dfwt_err"].as_f64().unwrap() - v["with_dfwt_err"].as_f64().unwrap();
    assert!((v["gap"].as_f64().unwrap() - gap).abs() < 1e-9);
    assert!(dir.path().join("pair.with_dfwt.jsonl").exists());
    assert!(dir.path().join("pair.without_dfwt.jsonl").exists());
}

#[test]
fn missing_dataset_is_an_environment_error() {
    assert_eq!(
        run(&["train", "--profile", "toy-cifar"]).status.code(),
        Some(2)
    );
    let out = bin()
        .args(["train", "--profile", "toy-cifar"])
        .env("WAVELETNET_DATA", "/nonexistent/cifar")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(run(&["train", "--steps", "0"]).status.code(), Some(2));
    assert_eq!(
        run(&["train", "--pair", "--ablate-dfwt"]).status.code(),
        Some(2)
    );
}
