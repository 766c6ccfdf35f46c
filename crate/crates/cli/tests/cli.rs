use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn reviewbench(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reviewbench"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("REVIEWBENCH_OUT")
        .output()
        .expect("spawn reviewbench")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = reviewbench(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, body: Value) -> String {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&body).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn synth(out: &Path, name: &str, extra: &[&str]) -> String {
    let mut args = vec!["synth", "--name", name];
    args.extend_from_slice(extra);
    ok(out, &args);
    out.join("dataset").join(format!("{name}.jsonl")).to_string_lossy().into_owned()
}

#[test]
fn ingest_csv_drops_one_word_reviews() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("raw.csv");
    fs::write(
        &input,
        "id,rating,course_title,text\n\
         r1,5,Intro to Python,Great course with clear <b>examples</b>\n\
         r2,1,Web Design,Boring\n\
         r3,2,Data Science Basics,Too slow and the quizzes were broken\n",
    )
    .unwrap();
    let out = tmp.path().join("out");
    let stdout = ok(
        &out,
        &["ingest", "--input", input.to_str().unwrap(), "--task", "sentiment", "--name", "tiny"],
    );
    assert!(stdout.contains("2 reviews kept, 1 dropped"), "{stdout}");
    let data = fs::read_to_string(out.join("dataset/tiny.jsonl")).unwrap();
    assert_eq!(data.lines().count(), 2);
    assert!(out.join("dataset/tiny.stats.csv").is_file());
}

#[test]
fn topic_ingest_without_map_fails() {
    let tmp = TempDir::new().unwrap();
    let input = tmp.path().join("raw.csv");
    fs::write(&input, "id,rating,course_title,text\nr1,5,Intro to Python,nice clear course\n").unwrap();
    let o = reviewbench(
        tmp.path(),
        &["ingest", "--input", input.to_str().unwrap(), "--task", "topic"],
    );
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("topic-map"));
}

#[test]
fn majority_eval_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path();
    let dataset = synth(out, "skewed", &["--task", "sentiment", "--size", "500", "--positive-prior", "0.9"]);
    let config = write_config(
        out,
        "majority.json",
        serde_json::json!({
            "task": "sentiment",
            "dataset": dataset,
            "model": {"type": "majority"},
            "cv": {"k": 10, "seed": 3}
        }),
    );
    ok(out, &["eval", "--config", &config]);
    let first: Value = serde_json::from_str(&fs::read_to_string(out.join("results/majority.json")).unwrap()).unwrap();
    assert!((first["accuracy_mean"].as_f64().unwrap() - 0.9).abs() < 1e-9);
    assert!(out.join("reports/majority.csv").is_file());
    assert!(out.join("reports/majority.md").is_file());

    ok(out, &["eval", "--config", &config, "--name", "again"]);
    let second: Value = serde_json::from_str(&fs::read_to_string(out.join("results/again.json")).unwrap()).unwrap();
    assert_eq!(first["folds"], second["folds"]);
    assert_eq!(first["accuracy_mean"], second["accuracy_mean"]);
    assert_eq!(first["f1_macro_mean"], second["f1_macro_mean"]);
}

#[test]
fn unknown_arch_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path();
    let dataset = synth(out, "small", &["--task", "sentiment", "--size", "100"]);
    let config = write_config(
        out,
        "bad.json",
        serde_json::json!({
            "dataset": dataset,
            "model": {"type": "neural", "config": {"arch": "gru"}}
        }),
    );
    let o = reviewbench(out, &["eval", "--config", &config]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model.config.arch"), "{err}");
}

#[test]
fn task_mismatch_fails() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path();
    let dataset = synth(out, "small", &["--task", "sentiment", "--size", "100"]);
    let config = write_config(
        out,
        "topic.json",
        serde_json::json!({"task": "topic", "dataset": dataset, "model": {"type": "majority"}}),
    );
    assert!(!reviewbench(out, &["eval", "--config", &config]).status.success());
}

#[test]
fn epoch_sweep_writes_one_row_per_value() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path();
    let dataset = synth(
        out,
        "balanced",
        &["--task", "sentiment", "--size", "80", "--positive-prior", "0.5"],
    );
    let config = write_config(
        out,
        "lstm.json",
        serde_json::json!({
            "dataset": dataset,
            "name": "lstm",
            "model": {"type": "neural", "config": {
                "arch": "lstm",
                "maxlen": 20,
                "embedding": {"type": "random", "dim": 8},
                "lstm_units": 4
            }},
            "cv": {"k": 2}
        }),
    );
    ok(out, &["sweep", "--config", &config, "--param", "epochs", "--values", "1,2,3"]);
    let csv = fs::read_to_string(out.join("reports/lstm.epochs.csv")).unwrap();
    let values: Vec<usize> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(values, [1, 2, 3]);
    assert!(out.join("results/lstm.epochs.json").is_file());

    let o = reviewbench(out, &["sweep", "--config", &config, "--param", "epochs", "--values", "3,2"]);
    assert!(!o.status.success());
}

#[test]
fn compare_and_report() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path();
    let dataset = synth(out, "cmp", &["--task", "sentiment", "--size", "200", "--positive-prior", "0.7"]);
    let config = write_config(
        out,
        "nb.json",
        serde_json::json!({"dataset": dataset, "model": {"type": "naive_bayes"}, "cv": {"k": 5}}),
    );
    ok(out, &["eval", "--config", &config, "--name", "a"]);
    ok(out, &["eval", "--config", &config, "--name", "b"]);
    ok(out, &["eval", "--config", &config, "--name", "c", "--seed", "9"]);
    let results = out.join("results");
    let path = |n: &str| results.join(format!("{n}.json")).to_string_lossy().into_owned();

    let stdout = ok(out, &["compare", "--a", &path("a"), "--b", &path("b"), "--dataset", &dataset]);
    assert!(stdout.starts_with("0 disagreements"), "{stdout}");
    assert!(out.join("reports/a_vs_b.txt").is_file());

    let o = reviewbench(out, &["compare", "--a", &path("a"), "--b", &path("c"), "--dataset", &dataset]);
    assert!(!o.status.success());

    ok(out, &["report", &path("a"), &path("c"), "--name", "both"]);
    let csv = fs::read_to_string(out.join("reports/both.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let md = fs::read_to_string(out.join("reports/both.md")).unwrap();
    assert!(md.contains("| Model |"));
}

#[test]
fn out_dir_falls_back_to_env() {
    let tmp = TempDir::new().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_reviewbench"))
        .args(["synth", "--task", "topic", "--size", "60", "--name", "env"])
        .env("REVIEWBENCH_OUT", tmp.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(tmp.path().join("dataset/env.jsonl").is_file());
}
