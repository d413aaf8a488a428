//! End-to-end tests driving the installed binary: artifact layout,
//! determinism, checkpoint compatibility, and ingestion fixtures.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use multiturn::data::{read_examples, write_examples};
use multiturn::metrics::exact_match;
use multiturn::synth;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_multiturn")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn run_err(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "command {args:?} unexpectedly passed");
    String::from_utf8(out.stderr).unwrap()
}

const SMALL_DIMS: &str = "word_dim=16\nchar_dim=4\nchar_filters=4\nchar_window=3\n\
trigram_dim=4\ntrigram_filters=4\ntrigram_buckets=101\nhidden_dim=8\n\
highway_layers=1\nt_max=3\nbatch_size=4\ntrain_word_embeddings=true\n";

/// Write a small labeled corpus plus a config file pointing at it.
fn reader_fixture(dir: &Path, extra: &str) -> (PathBuf, PathBuf, PathBuf) {
    let corpus = synth::overfit_corpus(8, 77);
    let (train, dev) = corpus.split_at(6);
    let train_path = dir.join("train.jsonl");
    let dev_path = dir.join("dev.jsonl");
    write_examples(&train_path, train).unwrap();
    write_examples(&dev_path, dev).unwrap();
    let config = dir.join("run.cfg");
    std::fs::write(
        &config,
        format!(
            "{SMALL_DIMS}epochs=2\ntrain_path={}\ndev_path={}\nout_dir={}\n{extra}",
            train_path.display(),
            dev_path.display(),
            dir.join("out").display(),
        ),
    )
    .unwrap();
    (config, train_path, dev_path)
}

#[test]
fn train_eval_predict_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _, dev_path) = reader_fixture(dir.path(), "");
    let config = config.to_str().unwrap();

    let stdout = run_ok(&["train", "--config", config]);
    assert!(stdout.contains("best dev F1"), "{stdout}");
    let out = dir.path().join("out");
    for name in ["config.resolved", "curve.csv", "model.ckpt", "eval.json", "eval.tsv"] {
        assert!(out.join(name).exists(), "missing {name}");
    }

    let ckpt = out.join("model.ckpt");
    let eval_dir = dir.path().join("eval_out");
    run_ok(&[
        "eval",
        ckpt.to_str().unwrap(),
        dev_path.to_str().unwrap(),
        "--config",
        config,
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval.json")).unwrap())
            .unwrap();
    let rows = rows.as_array().unwrap();
    let eval_em: f64 =
        rows.iter().map(|r| r["em"].as_f64().unwrap()).sum::<f64>() / rows.len() as f64;

    let pred_dir = dir.path().join("pred_out");
    run_ok(&[
        "predict",
        ckpt.to_str().unwrap(),
        dev_path.to_str().unwrap(),
        "--config",
        config,
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    let preds: std::collections::BTreeMap<String, String> = serde_json::from_str(
        &std::fs::read_to_string(pred_dir.join("predictions.json")).unwrap(),
    )
    .unwrap();
    assert!(pred_dir.join("trace.csv").exists());

    // rescoring the predictions file reproduces the in-process EM
    let dev = read_examples(&dev_path).unwrap();
    assert_eq!(preds.len(), dev.len());
    let rescored: f64 = dev
        .iter()
        .map(|ex| exact_match(&preds[&ex.id], &ex.golds()))
        .sum::<f64>()
        / dev.len() as f64;
    assert!((rescored - eval_em).abs() < 1e-12, "{rescored} vs {eval_em}");
}

#[test]
fn predict_on_empty_dataset_succeeds_with_empty_map() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _, _) = reader_fixture(dir.path(), "");
    let config = config.to_str().unwrap();
    run_ok(&["train", "--config", config]);
    let ckpt = dir.path().join("out").join("model.ckpt");

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let pred_dir = dir.path().join("pred_empty");
    run_ok(&[
        "predict",
        ckpt.to_str().unwrap(),
        empty.to_str().unwrap(),
        "--config",
        config,
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    let text = std::fs::read_to_string(pred_dir.join("predictions.json")).unwrap();
    assert_eq!(text.trim(), "{}");
}

#[test]
fn checkpoint_config_mismatch_reports_both_hashes() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _, dev_path) = reader_fixture(dir.path(), "");
    run_ok(&["train", "--config", config.to_str().unwrap()]);
    let ckpt = dir.path().join("out").join("model.ckpt");

    let drifted = dir.path().join("drifted.cfg");
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("hidden_dim=8", "hidden_dim=12");
    std::fs::write(&drifted, text).unwrap();

    let stderr = run_err(&[
        "eval",
        ckpt.to_str().unwrap(),
        dev_path.to_str().unwrap(),
        "--config",
        drifted.to_str().unwrap(),
    ]);
    assert!(stderr.contains("config mismatch"), "{stderr}");
    let hex_count = stderr
        .split(|c: char| !c.is_ascii_hexdigit())
        .filter(|w| w.len() == 16)
        .count();
    assert!(hex_count >= 2, "expected both hashes in: {stderr}");
}

#[test]
fn training_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _, _) = reader_fixture(dir.path(), "");
    let config = config.to_str().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_ok(&["train", "--config", config, "--out", out_a.to_str().unwrap()]);
    run_ok(&["train", "--config", config, "--out", out_b.to_str().unwrap()]);
    for name in ["curve.csv", "model.ckpt", "eval.json", "eval.tsv"] {
        let a = std::fs::read(out_a.join(name)).unwrap();
        let b = std::fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between reruns");
    }
}

#[test]
fn seed_override_changes_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _, _) = reader_fixture(dir.path(), "");
    let config = config.to_str().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    run_ok(&["train", "--config", config, "--out", out_a.to_str().unwrap()]);
    run_ok(&[
        "train", "--config", config, "--out", out_b.to_str().unwrap(), "--seed", "99",
    ]);
    let a = std::fs::read(out_a.join("model.ckpt")).unwrap();
    let b = std::fs::read(out_b.join("model.ckpt")).unwrap();
    assert_ne!(a, b, "different seeds produced identical checkpoints");
}

const SQUAD_FIXTURE: &str = r#"{
  "data": [
    {
      "title": "Fixture",
      "paragraphs": [
        {
          "context": "The quick brown fox jumps over the lazy dog.",
          "qas": [
            {
              "id": "q1",
              "question": "What jumps over the dog?",
              "answers": [{"text": "brown fox", "answer_start": 10}]
            }
          ]
        }
      ]
    }
  ]
}"#;

#[test]
fn ingest_squad_fixture_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("squad.json");
    std::fs::write(&input, SQUAD_FIXTURE).unwrap();
    let output = dir.path().join("squad.jsonl");
    let stdout = run_ok(&[
        "ingest-squad",
        input.to_str().unwrap(),
        output.to_str().unwrap(),
    ]);
    assert!(stdout.contains("ingested 1 examples"), "{stdout}");
    assert!(dir.path().join("squad.jsonl.config.resolved").exists());

    let examples = read_examples(&output).unwrap();
    assert_eq!(examples.len(), 1);
    let ex = &examples[0];
    assert_eq!(ex.id, "q1");
    assert_eq!(ex.span_text(), Some("brown fox"));
    assert_eq!(ex.answers, vec!["brown fox".to_string()]);
}

#[test]
fn ingest_marco_fixture_finds_span_in_second_passage() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("marco.jsonl");
    let line = serde_json::json!({
        "query_id": 7,
        "query": "what color is the sky",
        "query_type": "description",
        "passages": [
            {"passage_text": "Grass is green in most seasons.", "is_selected": 0},
            {"passage_text": "On a clear day the sky is blue everywhere.", "is_selected": 1}
        ],
        "answers": ["the sky is blue"]
    });
    std::fs::write(&input, format!("{line}\n")).unwrap();
    let output = dir.path().join("marco.out.jsonl");
    let stdout = run_ok(&[
        "ingest-marco",
        input.to_str().unwrap(),
        output.to_str().unwrap(),
    ]);
    assert!(stdout.contains("1 derived"), "{stdout}");
    assert!(stdout.contains("upper bound 1.0000"), "{stdout}");

    let examples = read_examples(&output).unwrap();
    let span = examples[0].span.expect("span derived");
    assert_eq!(span.passage, 1);
    assert_eq!(examples[0].answers, vec!["the sky is blue".to_string()]);
}

#[test]
fn derive_spans_preserves_existing_labels() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth::overfit_corpus(3, 5);
    let input = dir.path().join("in.jsonl");
    write_examples(&input, &corpus).unwrap();
    let output = dir.path().join("out.jsonl");
    let stdout = run_ok(&[
        "derive-spans",
        input.to_str().unwrap(),
        output.to_str().unwrap(),
    ]);
    assert!(stdout.contains("3 kept"), "{stdout}");
    let round = read_examples(&output).unwrap();
    for (a, b) in corpus.iter().zip(&round) {
        assert_eq!(a.span, b.span);
        assert_eq!(a.answers, b.answers);
    }
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "no_such_knob=1\n").unwrap();
    let stderr = run_err(&["train", "--config", config.to_str().unwrap()]);
    assert!(stderr.contains("no_such_knob"), "{stderr}");
}

#[test]
fn rank_train_writes_checkpoint_and_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (train, dev) = synth::ranker_corpus(12, 6, 3, 31);
    let train_path = dir.path().join("train.jsonl");
    let dev_path = dir.path().join("dev.jsonl");
    write_examples(&train_path, &train).unwrap();
    write_examples(&dev_path, &dev).unwrap();
    let config = dir.path().join("rank.cfg");
    std::fs::write(
        &config,
        format!(
            "trigram_buckets=211\nranker_filters=8\nranker_window=2\nranker_proj=8\n\
             ranker_epochs=6\ntrain_path={}\ndev_path={}\nout_dir={}\n",
            train_path.display(),
            dev_path.display(),
            dir.path().join("rank_out").display(),
        ),
    )
    .unwrap();
    let stdout = run_ok(&["rank-train", "--config", config.to_str().unwrap()]);
    assert!(stdout.contains("dev top-1"), "{stdout}");
    let out = dir.path().join("rank_out");
    for name in ["config.resolved", "ranker.ckpt", "rank_curve.csv", "rank.tsv"] {
        assert!(out.join(name).exists(), "missing {name}");
    }
}

#[test]
fn analyze_turns_histogram_sums_to_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (config, _, dev_path) = reader_fixture(dir.path(), "");
    let config = config.to_str().unwrap();
    run_ok(&["train", "--config", config]);
    let ckpt = dir.path().join("out").join("model.ckpt");
    let turn_dir = dir.path().join("turns_out");
    run_ok(&[
        "analyze-turns",
        ckpt.to_str().unwrap(),
        dev_path.to_str().unwrap(),
        "--config",
        config,
        "--out",
        turn_dir.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(turn_dir.join("turns.csv")).unwrap();
    let stops: usize = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(stops, read_examples(&dev_path).unwrap().len());
}

#[test]
fn grid_emits_full_table_and_cell_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "grid_modes=single,dynamic\ngrid_channels=word\ngrid_seeds=1\nepochs=1\n";
    let corpus = synth::overfit_corpus(6, 41);
    let (train, dev) = corpus.split_at(4);
    let train_path = dir.path().join("train.jsonl");
    let dev_path = dir.path().join("dev.jsonl");
    write_examples(&train_path, train).unwrap();
    write_examples(&dev_path, dev).unwrap();
    let out = dir.path().join("grid_out");
    let config = dir.path().join("grid.cfg");
    std::fs::write(
        &config,
        format!(
            "{SMALL_DIMS}train_path={}\ndev_path={}\nout_dir={}\n{extra}",
            train_path.display(),
            dev_path.display(),
            out.display(),
        ),
    )
    .unwrap();
    let stdout = run_ok(&["grid", "--config", config.to_str().unwrap()]);
    assert!(stdout.contains("single"), "{stdout}");
    assert!(stdout.contains("dynamic"), "{stdout}");

    let tsv = std::fs::read_to_string(out.join("grid.tsv")).unwrap();
    // header + 2 cells + 2 mean rows
    assert_eq!(tsv.lines().count(), 5, "{tsv}");
    for cell in ["single-word-s1", "dynamic-word-s1"] {
        for name in ["config.resolved", "model.ckpt", "eval.tsv", "turns.csv"] {
            assert!(out.join(cell).join(name).exists(), "missing {cell}/{name}");
        }
    }
}
