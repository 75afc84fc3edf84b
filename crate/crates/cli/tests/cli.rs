use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TOY: &str = r#"
seed = 5

[[datasets]]
name = "products"
synth = { domain = "products", n_reviews = 800 }

[[datasets]]
name = "restaurants"
synth = { domain = "restaurants", n_reviews = 800 }

[lm.mlstm]
hidden_size = 16
epochs = 4

[attack]
seeds = 40
n_per_seed = 8

[detect]
train_fake = 90
train_real = 40
eval_fake = 60
eval_real = 30
"#;

fn fakerev(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fakerev")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = fakerev(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
}

fn pipeline(dir: &Path, run: &str) {
    fs::write(dir.join("toy.toml"), TOY).unwrap();
    let set = format!("run_dir=\"{run}\"");
    for cmd in ["train-lm", "train-clf", "attack", "detect"] {
        ok(dir, &[cmd, "--config", "toy.toml", "--set", &set]);
    }
}

#[test]
fn end_to_end_toy_run_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    pipeline(dir, "a");
    pipeline(dir, "b");
    for ds in ["products", "restaurants"] {
        assert!(dir.join(format!("a/{ds}/attack/preservation.json")).is_file());
    }
    let files = [
        "detect/report.json",
        "detect/scores.csv",
        "products/attack/pool.jsonl",
        "restaurants/attack/pool.manifest.json",
        "manifest.json",
    ];
    for f in files {
        let a = fs::read(dir.join("a").join(f)).unwrap();
        let b = fs::read(dir.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("a/detect/report.json")).unwrap()).unwrap();
    let rows = report["report"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(report["report"]["datasets"], serde_json::json!(["products", "restaurants"]));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_digest"], report["config_digest"]);

    let out = fakerev(dir, &["report", "a", "b", "--out", "tables.txt"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("a products (mlstm)") && text.contains("b restaurants (mlstm)"), "{text}");
    assert!(text.contains("rank-bin + perplexity"), "{text}");
    assert_eq!(fs::read_to_string(dir.join("tables.txt")).unwrap(), text);

    // resuming the attack in place leaves every output unchanged
    let before = fs::read(dir.join("a/products/attack/pool.jsonl")).unwrap();
    ok(dir, &["attack", "--config", "toy.toml", "--set", "run_dir=\"a\""]);
    assert_eq!(fs::read(dir.join("a/products/attack/pool.jsonl")).unwrap(), before);
}

#[test]
fn typo_in_file_exits_1_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[attack]\nn_per_seeds = 3\n").unwrap();
    let out = fakerev(tmp.path(), &["train-lm", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("n_per_seeds"), "{err}");
}

#[test]
fn typo_in_override_exits_1_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fakerev(tmp.path(), &["train-clf", "--set", "classifier.epoch=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classifier.epoch"));
}

#[test]
fn bad_usage_exits_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(fakerev(tmp.path(), &["attack", "--bogus"]).status.code(), Some(1));
    assert_eq!(fakerev(tmp.path(), &["report", "nowhere"]).status.code(), Some(1));
    assert_eq!(fakerev(tmp.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_or_stale_stages_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fs::write(dir.join("toy.toml"), TOY).unwrap();
    let out = fakerev(dir, &["attack", "--config", "toy.toml", "--set", "run_dir=\"r\""]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-lm"));

    ok(dir, &["train-lm", "--config", "toy.toml", "--set", "run_dir=\"r\"", "--set", "lm.kind=\"ngram\""]);
    ok(dir, &["train-clf", "--config", "toy.toml", "--set", "run_dir=\"r\""]);
    // the stored model came from an n-gram configuration
    let out = fakerev(dir, &["attack", "--config", "toy.toml", "--set", "run_dir=\"r\""]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different configuration"));
}

#[test]
fn synth_corpus_writes_loadable_reviews() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["synth-corpus", "--domain", "restaurants", "--n-reviews", "50", "--seed", "3", "--out", "c.csv"]);
    ok(
        tmp.path(),
        &["synth-corpus", "--domain", "restaurants", "--n-reviews", "50", "--seed", "3", "--out", "c.jsonl"],
    );
    let csv = fakerev::corpus::load_reviews(&tmp.path().join("c.csv"), fakerev::corpus::Format::Csv).unwrap();
    let jsonl = fakerev::corpus::load_reviews(&tmp.path().join("c.jsonl"), fakerev::corpus::Format::Jsonl).unwrap();
    assert_eq!(csv.len(), 50);
    assert_eq!(csv, jsonl);
    assert_eq!(fakerev(tmp.path(), &["synth-corpus", "--out", "c.txt"]).status.code(), Some(1));
}

#[test]
fn file_datasets_run_through_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["synth-corpus", "--n-reviews", "600", "--seed", "8", "--out", "site.jsonl"]);
    let config = r#"
run_dir = "f"
[[datasets]]
name = "site"
reviews = "site.jsonl"
[lm]
kind = "ngram"
[attack]
seeds = 30
n_per_seed = 6
[detect]
train_fake = 40
train_real = 30
eval_fake = 30
eval_real = 20
"#;
    fs::write(dir.join("f.toml"), config).unwrap();
    for cmd in ["train-lm", "train-clf", "attack", "detect"] {
        ok(dir, &[cmd, "--config", "f.toml"]);
    }
    // editing the corpus invalidates everything trained on it
    let text = fs::read_to_string(dir.join("site.jsonl")).unwrap();
    fs::write(dir.join("site.jsonl"), text.lines().skip(1).collect::<Vec<_>>().join("\n")).unwrap();
    assert_eq!(fakerev(dir, &["detect", "--config", "f.toml"]).status.code(), Some(2));
}
