use std::path::Path;
use std::process::{Command, Output};

use kdlab_core::data::save_corpus;
use kdlab_core::data::toy::{generate_toy_task, ToyTaskSpec};
use kdlab_core::experiment::{ExperimentSpec, Manifest};

fn kdlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = kdlab(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn toy() -> ToyTaskSpec {
    ToyTaskSpec {
        vocab_size_src: 10,
        vocab_size_tgt: 10,
        length_range: [2, 4],
        mapping_seed: 5,
        noise_rate: 0.1,
        domain_perturbation: None,
        size: 120,
        test_size: 10,
        zipf_exponent: 1.0,
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_manifest(dir: &Path, stage: &str) {
    let m = Manifest::load(dir).unwrap().expect("manifest written");
    assert!(m.stages.contains_key(stage), "{stage} missing from {:?}", m.stages.keys());
    assert!(m.artifacts.contains_key(&format!("commands/{stage}.json")));
}

#[test]
fn pipeline_of_single_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (train, test) = generate_toy_task(&toy(), 0).unwrap();
    save_corpus(&train, &root.join("train"), serde_json::Value::Null).unwrap();
    save_corpus(&test, &root.join("test"), serde_json::Value::Null).unwrap();
    let (train_p, test_p) = (root.join("train"), root.join("test"));

    let vocab_dir = root.join("vocab");
    let out = ok(&[
        "bpe-train", "--src", s(&root.join("train.src")), "--tgt", s(&root.join("train.tgt")),
        "--size", "270", "--out", s(&vocab_dir),
    ]);
    assert!(out.contains("vocabulary"));
    assert_manifest(&vocab_dir, "bpe-train");
    let vocab = vocab_dir.join("vocab.json");

    let teacher = root.join("teacher");
    let phase = format!("{}=6", s(&train_p));
    let common = [
        "--size", "1x1", "--d-model", "16", "--d-ff", "32", "--heads", "2", "--max-len", "16",
        "--batch-tokens", "64", "--warmup", "2",
    ];
    let mut args = vec!["train", "--vocab", s(&vocab), "--phase", &phase, "--valid", s(&test_p), "--eval-every", "3"];
    args.extend(common);
    args.extend(["--checkpoint-every", "3", "--out", s(&teacher)]);
    assert!(ok(&args).contains("validation"));
    assert_manifest(&teacher, "train");
    assert!(teacher.join("checkpoints/step-000003.ckpt").is_file());
    let teacher_ck = teacher.join("model.ckpt");

    let dist = root.join("distill");
    ok(&[
        "distill", "--teacher", s(&teacher_ck), "--vocab", s(&vocab), "--corpus", s(&train_p),
        "--max-len", "8", "--beam", "2", "--out", s(&dist),
    ]);
    assert_manifest(&dist, "distill");
    let synthetic = dist.join("synthetic");
    assert_eq!(
        std::fs::read_to_string(synthetic.with_extension("src")).unwrap(),
        std::fs::read_to_string(root.join("train.src")).unwrap()
    );

    // Curriculum: synthetic targets first, then real ones.
    let student = root.join("student");
    let (p1, p2) = (format!("{}=3", s(&synthetic)), format!("{}=2", s(&train_p)));
    let mut args = vec!["train", "--vocab", s(&vocab), "--phase", &p1, "--phase", &p2, "--seed", "4"];
    args.extend(common);
    args.extend(["--out", s(&student)]);
    assert!(ok(&args).contains("step 5"));
    let log = std::fs::read_to_string(student.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"step\"")).count(), 5);

    let tr = root.join("translate");
    ok(&[
        "translate", "--model", s(&teacher_ck), "--vocab", s(&vocab), "--input", s(&root.join("test.src")),
        "--greedy", "--max-len", "8", "--out", s(&tr),
    ]);
    let lines = std::fs::read_to_string(tr.join("translations.txt")).unwrap();
    assert_eq!(lines.lines().count(), test.len());
    assert_manifest(&tr, "translate");

    let ev = root.join("eval");
    let out = ok(&[
        "evaluate", "--model", s(&teacher_ck), "--vocab", s(&vocab), "--corpus", s(&test_p),
        "--max-len", "8", "--out", s(&ev),
    ]);
    assert!(out.starts_with("BLEU"));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["entropy"].as_f64().unwrap() > 0.0);

    // Scoring the references against themselves.
    let ev_ref = root.join("eval-ref");
    let out = ok(&[
        "evaluate", "--hyps", s(&root.join("test.tgt")), "--corpus", s(&test_p), "--out", s(&ev_ref),
    ]);
    assert_eq!(out.trim(), "BLEU 100.00");

    let en = root.join("entropy");
    assert!(ok(&["entropy", "--model", s(&teacher_ck), "--vocab", s(&vocab), "--corpus", s(&test_p), "--out", s(&en)])
        .contains("nats"));
    assert_manifest(&en, "entropy");

    let tk = root.join("topk");
    ok(&[
        "topk-sweep", "--model", s(&teacher_ck), "--vocab", s(&vocab), "--corpus", s(&test_p),
        "--ks", "1,3", "--seeds", "0,1", "--max-len", "8", "--out", s(&tk),
    ]);
    let tsv = std::fs::read_to_string(tk.join("topk.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 3);
}

#[test]
fn invalid_experiment_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec::paper_mini();
    spec.students.sizes.clear();
    spec.param_budget = Some(10);
    let path = tmp.path().join("bad.toml");
    std::fs::write(&path, spec.to_toml()).unwrap();
    let out = kdlab(&["experiment", s(&path)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("grid must not be empty") && err.contains("budget"), "{err}");

    assert_eq!(kdlab(&["experiment", "--recipe", "nope"]).status.code(), Some(2));
    assert_eq!(kdlab(&["train"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let out = kdlab(&[
        "entropy", "--model", "/nonexistent.ckpt", "--vocab", "/nonexistent.json", "--corpus", "/x",
        "--out", s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn printed_recipe_parses_back() {
    let text = ok(&["experiment", "--recipe", "paper-mini", "--print-recipe"]);
    assert_eq!(ExperimentSpec::from_toml(&text).unwrap(), ExperimentSpec::paper_mini());
    assert!(ok(&["experiment", "--recipe", "paper-mini", "--check"]).contains("valid"));
}
