use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::{Command, Output};

use cgh_core::eval::ExperimentReport;

fn cgh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cgh")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_ARCH: &str = r#"{"conv1_kernels": 2, "conv2_kernels": 4, "feature_dim": 8, "lstm_hidden": 8, "fc1_dim": 8}"#;

fn write_config(dir: &Path, name: &str, extra: &str) -> String {
    let body = format!(
        r#"{{"arch": {TINY_ARCH}, "train": {{"max_iterations": 1, "batch_size": 16}},
            "data": {{"synthetic": {{"subjects": 2, "minutes": 5}}}},
            "output_dir": "{}"{extra}}}"#,
        p(&dir.join("out"))
    );
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_data_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let out = cgh(&["gen-data", "--out", p(&a), "--seed", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("Nordic walking"));
    assert!(cgh(&["gen-data", "--out", p(&b), "--seed", "4"]).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let mut rdr = csv::Reader::from_path(&a).unwrap();
    let mut rows: BTreeMap<(String, String), usize> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        *rows.entry((rec[0].to_string(), rec[1].to_string())).or_default() += 1;
    }
    let subjects: BTreeSet<&String> = rows.keys().map(|(s, _)| s).collect();
    assert_eq!(subjects.len(), 9);
    assert_eq!(rows.len(), 9 * 8);
    assert!(rows.values().all(|&n| n == 300 * 20));
}

#[test]
fn gen_data_reports_schema_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let spec: serde_json::Value = serde_json::from_str(cgh_core::data::DEFAULT_SPEC_JSON).unwrap();
    let mut spec = spec;
    spec["motifs"][1]["frequency"] = serde_json::json!(-1.0);
    let path = dir.path().join("spec.json");
    std::fs::write(&path, spec.to_string()).unwrap();
    let out = cgh(&["gen-data", "--spec", p(&path), "--out", p(&dir.path().join("x.csv"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/motifs/1/frequency"), "{}", stderr(&out));
}

#[test]
fn train_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.json", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = cgh(&["train", "--config", &cfg, "--seed", "3", "--out", p(&a)]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(cgh(&["train", "--config", &cfg, "--seed", "3", "--out", p(&b)]).status.success());
    for f in ["model.cgh", "loss.csv", "summary.json", "architecture.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read(a.join("model.cgh")).unwrap(), std::fs::read(b.join("model.cgh")).unwrap());

    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    let params = summary["parameter_count"].as_u64().unwrap();
    assert_eq!(summary["memory_footprint_bits"].as_u64().unwrap(), 32 * params);
    let acc = summary["final_train_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let ckpt = cgh_core::model::load(&a.join("model.cgh")).unwrap();
    assert_eq!(ckpt.metadata.seed, 3);
}

#[test]
fn config_errors_exit_one_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.json", r#", "learning_rate": 0.1"#);
    let out = cgh(&["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
    assert!(!dir.path().join("out").exists());

    let path = dir.path().join("missing.json");
    std::fs::write(&path, r#"{"data": {"csv": {"path": "/definitely/missing.csv"}}, "output_dir": "o"}"#).unwrap();
    let out = cgh(&["experiment", "--config", p(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("/definitely/missing.csv"));
}

#[test]
fn experiment_compares_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "exp.json",
        r#", "models": ["full", "trimmed"], "repetitions": 2, "pairs": [[3, 4]]"#,
    );
    let out = cgh(&["experiment", "--config", &cfg, "--jobs", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let out_dir = dir.path().join("out");
    for model in ["full", "trimmed"] {
        let json = std::fs::read_to_string(out_dir.join(format!("report_{model}_personalized.json"))).unwrap();
        let report = ExperimentReport::from_json(&json).unwrap();
        assert_eq!(report.repetitions, 2);
        assert!(report.users.iter().all(|u| u.runs.len() == 2));
        let line = text
            .lines()
            .find(|l| l.starts_with(&format!("overall mean {model}:")))
            .expect("overall mean line");
        let printed: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
        assert!((printed - report.overall_mean).abs() <= 1e-12);
        let row = text.lines().find(|l| l.starts_with(model)).expect("table row");
        assert!(row.split_whitespace().nth(2) == Some("2"), "{row}");
    }
    assert!(out_dir.join("comparison.csv").exists());
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let out = cgh(&["gradcheck"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let names: Vec<&str> = text.lines().filter_map(|l| l.split_whitespace().next()).collect();
    assert_eq!(names, ["FC", "Conv1D", "MaxPool", "LSTM", "Softmax+CE", "Dropout", "Composite"]);
    assert!(text.lines().all(|l| l.ends_with("PASS")));

    let out = cgh(&["gradcheck", "--instances", "3", "--tamper", "fc"]);
    assert_eq!(out.status.code(), Some(2));
    let text = stdout(&out);
    let fc = text.lines().find(|l| l.starts_with("FC ")).unwrap();
    assert!(fc.ends_with("FAIL"), "{fc}");
    assert!(text.lines().filter(|l| !l.starts_with("FC ")).all(|l| l.ends_with("PASS")));
}

#[test]
fn embed_exports_states() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    assert!(cgh(&["gen-data", "--out", p(&data), "--subjects", "1", "--seed", "1"]).status.success());
    let cfg = dir.path().join("train.json");
    std::fs::write(
        &cfg,
        format!(
            r#"{{"arch": {TINY_ARCH}, "train": {{"max_iterations": 1}}, "data": {{"csv": {{"path": "{}"}}}}, "output_dir": "{}"}}"#,
            p(&data),
            p(&dir.path().join("model"))
        ),
    )
    .unwrap();
    assert!(cgh(&["train", "--config", p(&cfg)]).status.success());
    let ckpt = dir.path().join("model").join("model.cgh");

    let embed = |which: &str, out: &Path, seed: &str| {
        cgh(&[
            "embed", "--checkpoint", p(&ckpt), "--data", p(&data), "--which", which, "--out", p(out), "--seed", seed,
            "--iterations", "150",
        ])
    };
    let (s1, s5, s5b) = (dir.path().join("s1.csv"), dir.path().join("s5.csv"), dir.path().join("s5b.csv"));
    for (which, out) in [("s1", &s1), ("s5", &s5), ("s5", &s5b)] {
        let o = embed(which, out, "2");
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let read = |path: &Path| std::fs::read_to_string(path).unwrap();
    let (a, b) = (read(&s1), read(&s5));
    assert!(a.starts_with("x,y,label,activity_name\n"));
    assert_eq!(a.lines().count(), 161);
    assert_eq!(a.lines().count(), b.lines().count());
    assert_eq!(b, read(&s5b));
    let labels: Vec<&str> = a.lines().skip(1).map(|l| l.split(',').nth(2).unwrap()).collect();
    let expected: Vec<String> = (0..8).flat_map(|c| std::iter::repeat_n(c.to_string(), 20)).collect();
    assert_eq!(labels, expected);

    let o = embed("s7", &dir.path().join("bad.csv"), "2");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("s1, s2, s3, s4, s5"));
}
