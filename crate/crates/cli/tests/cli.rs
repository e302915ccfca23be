use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn embedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embedit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = embedit(args);
    assert!(
        out.status.success(),
        "embedit {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn init(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let path = dir.join(name);
    ok(&["init", "--seed", &seed.to_string(), "--out", p(&path)]);
    path
}

const TARGETS: [(&str, &str); 10] = [
    ("bear", "panda"),
    ("cat", "dog"),
    ("rose", "banana"),
    ("doctor", "nurse"),
    ("sky", "marble"),
    ("apple", "strawberry"),
    ("pedestal", "plinth"),
    ("zoo", "bowl"),
    ("teacher", "ceo"),
    ("portrait", "painting"),
];

fn write_dataset(path: &Path) {
    let mut lines = Vec::new();
    for (i, (word, other)) in TARGETS.iter().enumerate() {
        let next = TARGETS[(i + 1) % TARGETS.len()].0;
        let entry = serde_json::json!({
            "source": format!("a photo of a {word}"),
            "destination": format!("a photo of a {other}"),
            "target_word": word,
            "positives": [[format!("the {word}"), format!("the {other}")]],
            "negatives": [
                [format!("a photo of a {next}"), format!("a photo of a {next}")],
                ["a red bowl", "a red bowl"],
            ],
        });
        lines.push(entry.to_string());
    }
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn init_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = std::fs::read(init(dir.path(), "a.emb", 7)).unwrap();
    let b = std::fs::read(init(dir.path(), "b.emb", 7)).unwrap();
    let c = std::fs::read(init(dir.path(), "c.emb", 8)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(
        &cfg,
        r#"{"d_model": 10, "n_layers": 1, "n_heads": 3, "d_ff": 8, "context_length": 8, "eps": 1e-5}"#,
    )
    .unwrap();
    let out = embedit(&["init", "--config", p(&cfg), "--out", p(&dir.path().join("x.emb"))]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert_eq!(stderr.lines().count(), 1, "{stderr}");
    assert!(!dir.path().join("x.emb").exists());
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let w = init(dir.path(), "w.emb", 1);
    let out = dir.path().join("out");
    assert_eq!(embedit(&["edit", "--weights", p(&w)]).status.code(), Some(1));
    let bad_lambda = embedit(&[
        "edit", "--weights", p(&w), "--out", p(&out), "--source", "a bear", "--destination", "a cat",
        "--target", "bear", "--lambda", "1.5",
    ]);
    assert_eq!(bad_lambda.status.code(), Some(1));
    let unknown = embedit(&[
        "edit", "--weights", p(&w), "--out", p(&out), "--source", "a wombat", "--destination", "a cat",
        "--target", "wombat",
    ]);
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn edit_then_revert_restores_the_archive() {
    let dir = tempfile::tempdir().unwrap();
    let w = init(dir.path(), "w.emb", 3);
    let edited = dir.path().join("edited");
    let stdout = ok(&[
        "edit", "--weights", p(&w), "--out", p(&edited), "--source", "a photo of a bear", "--destination",
        "a photo of a polar bear", "--target", "bear", "--lr", "0.01", "--max-iters", "20",
    ]);
    assert!(stdout.contains("\"bear\""));
    let original = std::fs::read(&w).unwrap();
    assert_ne!(std::fs::read(edited.join("weights.emb")).unwrap(), original);

    let reverted = dir.path().join("reverted");
    ok(&[
        "revert", "--weights", p(&edited.join("weights.emb")), "--ledger", p(&edited.join("ledger.json")),
        "--out", p(&reverted),
    ]);
    assert_eq!(std::fs::read(reverted.join("weights.emb")).unwrap(), original);
    let ledger: Value = serde_json::from_str(&std::fs::read_to_string(reverted.join("ledger.json")).unwrap()).unwrap();
    assert_eq!(ledger["entries"].as_array().unwrap().len(), 0);
}

#[test]
fn seq_edit_then_eval_reports_every_entry() {
    let dir = tempfile::tempdir().unwrap();
    let w = init(dir.path(), "w.emb", 4);
    let data = dir.path().join("edits.jsonl");
    write_dataset(&data);
    let run = dir.path().join("run");
    ok(&["seq-edit", "--weights", p(&w), "--dataset", p(&data), "--out", p(&run), "--max-iters", "10"]);

    let filtered = std::fs::read_to_string(run.join("dataset.jsonl")).unwrap();
    assert_eq!(filtered.lines().count(), 10);
    // Each entry's first negative names the next entry's target, so the
    // sequential filter drops it.
    for line in filtered.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["negatives"].as_array().unwrap().len(), 1);
    }

    let eval = dir.path().join("eval");
    let table = ok(&[
        "eval", "--weights", p(&run.join("weights.emb")), "--reference", p(&w), "--dataset",
        p(&run.join("dataset.jsonl")), "--out", p(&eval),
    ]);
    assert!(table.contains("efficacy"));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(eval.join("eval.json")).unwrap()).unwrap();
    let per_entry = report["per_entry"].as_array().unwrap();
    assert_eq!(per_entry.len(), 10);
    assert!(per_entry.iter().all(|r| r["strict_specificity"].as_f64() == Some(100.0)));
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let w = init(dir.path(), "w.emb", 5);
    let data = dir.path().join("edits.jsonl");
    write_dataset(&data);
    let runs: Vec<PathBuf> = ["r1", "r2"].iter().map(|r| dir.path().join(r)).collect();
    for run in &runs {
        ok(&["seq-edit", "--weights", p(&w), "--dataset", p(&data), "--out", p(run), "--max-iters", "5"]);
    }
    for file in ["weights.emb", "ledger.json", "result.json", "dataset.jsonl"] {
        assert_eq!(
            std::fs::read(runs[0].join(file)).unwrap(),
            std::fs::read(runs[1].join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn report_counts_a_768_wide_edit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("wide.json");
    std::fs::write(
        &cfg,
        r#"{"d_model": 768, "n_layers": 1, "n_heads": 12, "d_ff": 32, "context_length": 8, "eps": 1e-5}"#,
    )
    .unwrap();
    let w = dir.path().join("wide.emb");
    ok(&["init", "--config", p(&cfg), "--seed", "1", "--out", p(&w)]);
    let run = dir.path().join("run");
    ok(&[
        "edit", "--weights", p(&w), "--out", p(&run), "--source", "a photo of a bear", "--destination",
        "a photo of a panda", "--target", "bear", "--max-iters", "1",
    ]);
    let stdout = ok(&["report", "--weights", p(&run.join("weights.emb")), "--ledger", p(&run.join("ledger.json"))]);
    assert!(stdout.contains("modified=768 flops=1536"), "{stdout}");
}

#[test]
fn dual_encoder_report_combines_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let w1 = init(dir.path(), "a.emb", 1);
    let cfg = dir.path().join("c16.json");
    std::fs::write(&cfg, r#"{"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "context_length": 8, "eps": 1e-5}"#)
        .unwrap();
    let w2 = dir.path().join("b.emb");
    ok(&["init", "--config", p(&cfg), "--seed", "2", "--out", p(&w2)]);
    let run = dir.path().join("run");
    ok(&[
        "edit", "--weights", p(&w1), "--weights2", p(&w2), "--out", p(&run), "--source", "a red rose",
        "--destination", "a blue rose", "--target", "red", "--max-iters", "3",
    ]);
    let stdout = ok(&[
        "report", "--weights", p(&run.join("weights.emb")), "--ledger", p(&run.join("ledger.json")),
        "--weights2", p(&run.join("weights2.emb")), "--ledger2", p(&run.join("ledger2.json")),
        "--out", p(&run),
    ]);
    assert!(stdout.contains("combined target=red modified=24 flops=48"), "{stdout}");
    assert!(run.join("budget.json").exists());
}

#[test]
fn gender_and_probe_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let w = init(dir.path(), "w.emb", 11);
    let gender = dir.path().join("gender.jsonl");
    let line = serde_json::json!({
        "profession": "doctor",
        "validation": "a doctor",
        "tests": ["a doctor", "a photo of a doctor", "the doctor", "a painting of a doctor", "digital art of a doctor"],
        "female_ref": "a photo of a woman",
        "male_ref": "a photo of a man",
        "stereotypical_prompt": "a male doctor",
        "counter_prompt": "a female doctor",
    });
    std::fs::write(&gender, format!("{line}\n")).unwrap();
    let out = dir.path().join("g");
    ok(&["gender", "--weights", p(&w), "--dataset", p(&gender), "--out", p(&out)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("gender.json")).unwrap()).unwrap();
    assert_eq!(report["professions"][0]["alpha"].as_f64(), Some(2.0));
    assert_eq!(report["professions"][0]["result"]["tau"].as_f64(), Some(0.0));

    let manual = embedit(&["gender", "--weights", p(&w), "--dataset", p(&gender), "--mode", "manual", "--out", p(&out)]);
    assert_eq!(manual.status.code(), Some(1), "manual mode without lambda");

    let probe = dir.path().join("probe.json");
    let items: Vec<Value> = ["bear", "cat", "panda", "dog", "rose", "banana", "apple", "strawberry", "sky", "marble"]
        .iter()
        .enumerate()
        .map(|(i, w)| serde_json::json!({"word": w, "label": u8::from(i < 4)}))
        .collect();
    std::fs::write(&probe, serde_json::json!({"label_names": ["thing", "animal"], "items": items}).to_string()).unwrap();
    let pout = dir.path().join("p");
    ok(&["probe", "--weights", p(&w), "--dataset", p(&probe), "--out", p(&pout), "--epochs", "200"]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(pout.join("probe.json")).unwrap()).unwrap();
    let acc = report["mean_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["seeds"].as_array().unwrap().len(), 5);
}
