mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use common::{knnbox, knnbox_ok, s, Artifacts};

fn artifacts() -> &'static Artifacts {
    static A: OnceLock<Artifacts> = OnceLock::new();
    A.get_or_init(|| Artifacts::build("cli"))
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn building_twice_gives_identical_files() {
    let a = artifacts();
    let again = a.dir.join("store_again");
    let line = knnbox_ok(&[
        "build",
        "--model",
        s(&a.model),
        "--corpus",
        s(&a.corpus("datastore")),
        "--out",
        s(&again),
    ])
    .remove(0);
    assert_eq!(line["command"], "build");
    let first = dir_bytes(&a.datastore);
    assert!(first.len() >= 3);
    assert_eq!(first, dir_bytes(&again));
}

#[test]
fn prune_report_accounts_for_every_entry() {
    let a = artifacts();
    let line = &a.prune_line;
    let n = line["n"].as_u64().unwrap();
    let kept = line["report"]["kept"].as_u64().unwrap();
    let dropped = line["report"]["dropped"].as_u64().unwrap();
    assert_eq!(kept + dropped, n);
    let scale = line["report"]["scale"].as_f64().unwrap();
    assert!((scale - kept as f64 / n as f64).abs() < 1e-12);
    assert_eq!(line["transforms"], serde_json::json!(["pca", "prune_margin"]));
}

fn eval_accuracy(lambda: &str) -> f64 {
    let a = artifacts();
    let line = knnbox_ok(&[
        "eval",
        "--model",
        s(&a.model),
        "--datastore",
        s(&a.datastore),
        "--corpus",
        s(&a.corpus("test")),
        "--mode",
        "teacher-forced",
        "--lambda",
        lambda,
    ])
    .remove(0);
    line["report"]["accuracy"].as_f64().unwrap()
}

#[test]
fn eval_with_retrieval_beats_lambda_zero() {
    let with = eval_accuracy("0.5");
    let without = eval_accuracy("0");
    assert!(with > without, "{with} vs {without}");
}

#[test]
fn lambda_zero_translation_equals_the_base_model() {
    let a = artifacts();
    let text = common::first_source(a, "test");
    let base = knnbox_ok(&["translate", "--model", s(&a.model), "--text", &text]).remove(0);
    let zero = knnbox_ok(&[
        "translate",
        "--model",
        s(&a.model),
        "--datastore",
        s(&a.datastore),
        "--lambda",
        "0",
        "--text",
        &text,
    ])
    .remove(0);
    assert_eq!(base["tokens"], zero["tokens"]);
}

#[test]
fn translate_prints_one_line_per_sentence_with_traces() {
    let a = artifacts();
    let lines = knnbox_ok(&[
        "translate",
        "--model",
        s(&a.model),
        "--datastore",
        s(&a.pruned),
        "--pca",
        s(&a.pca),
        "--text",
        "the doctor is sterile",
        "--text",
        "a small cat eats",
        "--trace",
    ]);
    assert_eq!(lines.len(), 2);
    for line in &lines {
        let steps = line["traces"].as_array().unwrap();
        assert_eq!(steps.len(), line["tokens"].as_array().unwrap().len());
        assert_eq!(steps[0]["neighbors"].as_array().unwrap().len(), 8);
    }
}

#[test]
fn ivf_and_exact_agree_when_probing_every_list() {
    let a = artifacts();
    let text = common::first_source(a, "test");
    let run = |extra: &[&str]| {
        let mut args = vec!["translate", "--model", s(&a.model), "--datastore", s(&a.datastore), "--text", &text];
        args.extend_from_slice(extra);
        knnbox_ok(&args).remove(0)["tokens"].clone()
    };
    assert_eq!(run(&[]), run(&["--ivf", s(&a.ivf)]));
}

#[test]
fn adaptive_combiner_trains_and_decodes() {
    let a = artifacts();
    let net = a.dir.join("metanet.bin");
    let line = knnbox_ok(&[
        "train-combiner",
        "--model",
        s(&a.model),
        "--datastore",
        s(&a.datastore),
        "--corpus",
        s(&a.corpus("heldout")),
        "--epochs",
        "3",
        "--out",
        s(&net),
    ])
    .remove(0);
    assert!(line["report"]["final_loss"].as_f64().unwrap() <= line["report"]["initial_loss"].as_f64().unwrap());
    let out = knnbox_ok(&[
        "translate",
        "--model",
        s(&a.model),
        "--datastore",
        s(&a.datastore),
        "--metanet",
        s(&net),
        "--text",
        "the nurse is dizzy",
        "--trace",
    ])
    .remove(0);
    let weights = out["traces"][0]["option_weights"].as_array().unwrap();
    assert_eq!(weights.len(), 9);
}

#[test]
fn configuration_errors_exit_with_two() {
    let a = artifacts();
    let unknown = knnbox(&["eval", "--no-such-flag"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("Usage"));
    let bad_lambda = knnbox(&[
        "translate",
        "--model",
        s(&a.model),
        "--datastore",
        s(&a.datastore),
        "--lambda",
        "1.5",
        "--text",
        "the cat",
    ]);
    assert_eq!(bad_lambda.status.code(), Some(2));
    let missing = knnbox(&["translate", "--model", "/nonexistent/model.bin", "--text", "x"]);
    assert_eq!(missing.status.code(), Some(2));
    let pca_mismatch = knnbox(&["translate", "--model", s(&a.model), "--datastore", s(&a.pruned), "--text", "x"]);
    assert_eq!(pca_mismatch.status.code(), Some(2));
}

#[test]
fn a_truncated_checkpoint_exits_with_one() {
    let a = artifacts();
    let bytes = std::fs::read(&a.model).unwrap();
    let truncated = a.dir.join("truncated.bin");
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let out = knnbox(&["translate", "--model", s(&truncated), "--text", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["exit_code"], 1);

    let foreign = a.dir.join("foreign.bin");
    std::fs::write(&foreign, b"not a model").unwrap();
    let out = knnbox(&["translate", "--model", s(&foreign), "--text", "x"]);
    assert_eq!(out.status.code(), Some(2));
}
