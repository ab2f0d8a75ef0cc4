use std::path::Path;
use std::process::{Command, Output};

use kriss::synthetic::{SyntheticConfig, SyntheticWorld, CORPUS_FILE, ENTITIES_FILE, HELDOUT_FILE};

fn kriss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kriss"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = kriss(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_world(dir: &Path) {
    let config = SyntheticConfig {
        entities: 8,
        documents: 200,
        shared_pairs: 1,
        heldout_per_entity: 2,
        shared_per_entity: 1,
        hard_per_entity: 1,
        ..SyntheticConfig::default()
    };
    SyntheticWorld::generate(&config).unwrap().write(dir).unwrap();
}

#[test]
fn end_to_end_flow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_world(d);
    let entities = d.join(ENTITIES_FILE);
    let mentions = d.join("mentions.jsonl");
    let checkpoint = d.join("model.krsm");
    let index = d.join("index");
    let results = d.join("results.jsonl");
    let train_cfg = d.join("train.cfg");
    std::fs::write(&train_cfg, "n = 4\ndim = 8\nlayers = 1\nheads = 2\nmax_len = 64\n").unwrap();

    let text = ok(&["ontology", "validate", "--entities", s(&entities)]);
    assert!(text.starts_with("8 entities"), "{text}");
    let report = ok(&["ontology", "ambiguity-report", "--entities", s(&entities)]);
    assert!(report.starts_with("surface\tcount\tentity_ids\n"));
    assert!(report.lines().count() > 1, "{report}");

    ok(&[
        "generate",
        "--entities",
        s(&entities),
        "--corpus",
        s(&d.join(CORPUS_FILE)),
        "--out",
        s(&mentions),
    ]);
    ok(&[
        "train",
        "--entities",
        s(&entities),
        "--mentions",
        s(&mentions),
        "--out",
        s(&checkpoint),
        "--config",
        s(&train_cfg),
        "--steps",
        "3",
    ]);
    assert!(checkpoint.exists());
    ok(&[
        "index",
        "build",
        "--entities",
        s(&entities),
        "--mentions",
        s(&mentions),
        "--checkpoint",
        s(&checkpoint),
        "--out",
        s(&index),
        "--k-proto",
        "4",
    ]);
    ok(&[
        "link",
        "--index",
        s(&index),
        "--queries",
        s(&d.join(HELDOUT_FILE)),
        "--top-k",
        "5",
        "--out",
        s(&results),
    ]);
    let lines = std::fs::read_to_string(&results).unwrap();
    assert_eq!(lines.lines().count(), 16);

    let tsv = ok(&[
        "eval",
        "--results",
        s(&results),
        "--gold",
        s(&d.join(HELDOUT_FILE)),
        "--entities",
        s(&entities),
        "--metrics",
        "strict,lenient",
        "--format",
        "tsv",
    ]);
    assert!(tsv.contains("strict_accuracy\t"), "{tsv}");
    assert!(tsv.contains("lenient_accuracy\t"), "{tsv}");

    let json = ok(&[
        "eval",
        "--results",
        s(&results),
        "--gold",
        s(&d.join(HELDOUT_FILE)),
        "--entities",
        s(&entities),
        "--metrics",
        "strict",
    ]);
    let value: serde_json::Value = serde_json::from_str(&json).unwrap();
    let strict = value["strict_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&strict));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(kriss(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(kriss(&["link", "--index", "x"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "tau = 0\n").unwrap();
    let out = kriss(&[
        "train",
        "--entities",
        "e.jsonl",
        "--mentions",
        "m.jsonl",
        "--out",
        "m.krsm",
        "--config",
        s(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn data_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let out = kriss(&["ontology", "validate", "--entities", s(&missing)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\": \"A\"\n").unwrap();
    let out = kriss(&["ontology", "validate", "--entities", s(&broken)]);
    assert_eq!(out.status.code(), Some(3));
}
