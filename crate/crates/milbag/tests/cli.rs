mod common;

use std::path::Path;
use std::process::{Command, Output};

fn milbag(args: &[&str], env: &[(&str, &Path)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_milbag"));
    cmd.args(args).env_remove(milbag::DATA_DIR_ENV);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend(["--preset", "synthetic", "--quiet"]);
    for o in common::TINY_OVERRIDES {
        v.extend(["--set", o]);
    }
    v
}

#[test]
fn generate_train_evaluate_export_cv() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let cv = tmp.path().join("cv");
    let d = data.to_str().unwrap();

    ok(&milbag(&with_tiny(&["generate", "--out", d]), &[]));
    let index: serde_json::Value = serde_json::from_slice(&std::fs::read(data.join("index.json")).unwrap()).unwrap();
    assert_eq!(index["bags"].as_array().unwrap().len(), 12);
    assert!(data.join("manifest.json").exists());

    // dataset taken from the environment
    ok(&milbag(
        &with_tiny(&["train", "--out", run.to_str().unwrap()]),
        &[(milbag::DATA_DIR_ENV, &data)],
    ));
    let ckpt = run.join("model.ckpt");
    assert!(ckpt.exists());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["tool"]["name"], "milbag");
    for line in std::fs::read_to_string(run.join("provenance.jsonl")).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["sources"]
            .as_array()
            .unwrap()
            .iter()
            .all(|s| s["role"] == "key" || s["role"] == "regular"));
    }

    let eval_json = tmp.path().join("eval.json");
    let stdout = ok(&milbag(
        &[
            "evaluate",
            "--dataset",
            d,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            eval_json.to_str().unwrap(),
        ],
        &[],
    ));
    assert!(stdout.contains("auc"), "{stdout}");
    let eval: serde_json::Value = serde_json::from_slice(&std::fs::read(&eval_json).unwrap()).unwrap();
    assert_eq!(eval["predictions"].as_array().unwrap().len(), 12);

    let csv_path = tmp.path().join("attention.csv");
    ok(&milbag(
        &[
            "export-attention",
            "--dataset",
            d,
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            csv_path.to_str().unwrap(),
        ],
        &[],
    ));
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(
        reader.headers().unwrap().iter().collect::<Vec<_>>(),
        milbag::attention::CSV_COLUMNS.to_vec()
    );
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 12 * 12);
    // one slice per bag here, so both columns sum to one over a bag
    // (attention comes out of an f32 model)
    for col in [3, 4] {
        let total: f64 = rows[..12].iter().map(|r| r[col].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-6, "column {col} sums to {total}");
    }

    let stdout = ok(&milbag(
        &with_tiny(&[
            "cv",
            "--dataset",
            d,
            "--out",
            cv.to_str().unwrap(),
            "--provenance",
            "--workers",
            "2",
        ]),
        &[],
    ));
    assert!(stdout.contains("AUC"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(cv.join("cv_report.json")).unwrap()).unwrap();
    assert_eq!(report["folds"].as_array().unwrap().len(), 6);
    assert!(cv.join("provenance.jsonl").exists());
}

#[test]
fn user_errors_are_messages_not_panics() {
    let tmp = tempfile::tempdir().unwrap();
    let cases: Vec<(Vec<&str>, &str)> = vec![
        (vec!["cv", "--out", "x"], "no dataset given"),
        (vec!["cv", "--dataset", "/nonexistent/dir", "--out", "x"], "index.json"),
        (vec!["show-config", "--preset", "fast"], "unknown preset"),
        (vec!["show-config", "--set", "train.epochz=1"], "epochz"),
        (vec!["show-config", "--set", "train.alpha=0.9"], "alpha"),
        (vec!["show-config", "--ablation", "E"], "unknown ablation"),
        (
            vec!["evaluate", "--dataset", "synth", "--checkpoint", "/nonexistent.ckpt"],
            "nonexistent.ckpt",
        ),
    ];
    for (args, needle) in cases {
        let out = milbag(&args, &[]);
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {stderr}");
        assert!(stderr.starts_with("error: "), "{args:?}: {stderr}");
        assert!(stderr.contains(needle), "{args:?}: {stderr}");
        assert!(!stderr.contains("panicked"), "{stderr}");
    }

    // a corrupt bag file names the file and the byte offset
    let data = tmp.path().join("d");
    ok(&milbag(&with_tiny(&["generate", "--out", data.to_str().unwrap()]), &[]));
    let victim = data.join("bag-0003.milbag");
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes.truncate(bytes.len() / 2);
    std::fs::write(&victim, bytes).unwrap();
    let out = milbag(&["cv", "--dataset", data.to_str().unwrap(), "--out", "x"], &[]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("bag-0003.milbag") && stderr.contains("at byte"),
        "{stderr}"
    );
}

#[test]
fn show_config_round_trips_through_a_file() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&milbag(
        &["show-config", "--preset", "mu_sweep", "--set", "train.epochs=7"],
        &[],
    ));
    let file = tmp.path().join("c.toml");
    std::fs::write(&file, &text).unwrap();
    let again = ok(&milbag(&["show-config", "--config", file.to_str().unwrap()], &[]));
    assert_eq!(text, again);
    assert!(text.contains("epochs = 7"));
    assert!(text.contains("parameter = \"mu\""));
}

#[test]
fn gradcheck_subcommand_reports_every_case() {
    let out = milbag(&["gradcheck"], &[]);
    let stdout = ok(&out);
    assert!(
        stdout.lines().filter(|l| l.starts_with("PASS")).count() >= 16,
        "{stdout}"
    );
    assert!(!stdout.contains("FAIL"));
}
