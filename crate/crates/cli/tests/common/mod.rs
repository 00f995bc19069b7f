#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

pub fn knnbox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_knnbox"))
        .args(args)
        .output()
        .expect("binary runs")
}

/// Runs a command that must succeed and returns its JSON lines.
pub fn knnbox_ok(args: &[&str]) -> Vec<Value> {
    let out = knnbox(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).expect("json line"))
        .collect()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Artifacts produced by the CLI from the bundled corpus.
pub struct Artifacts {
    pub dir: PathBuf,
    pub model: PathBuf,
    pub datastore: PathBuf,
    pub pca_store: PathBuf,
    pub pca: PathBuf,
    pub pruned: PathBuf,
    pub prune_line: Value,
    pub ivf: PathBuf,
}

impl Artifacts {
    pub fn corpus(&self, split: &str) -> PathBuf {
        self.dir.join(format!("{split}.tsv"))
    }

    /// Builds everything under a per-test-binary directory.
    pub fn build(tag: &str) -> Self {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(format!("knnbox-{tag}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        knnbox_ok(&["synth", "--seed", "3", "--out", s(&dir)]);
        let model = dir.join("model.bin");
        let mut train = vec!["train-base", "--corpus"];
        let train_path = dir.join("train.tsv");
        train.push(s(&train_path));
        let extras: Vec<PathBuf> = ["datastore", "heldout", "test", "mixed_heldout", "mixed_test"]
            .iter()
            .map(|n| dir.join(format!("{n}.tsv")))
            .collect();
        for e in &extras {
            train.push("--vocab-from");
            train.push(s(e));
        }
        train.extend(["--out", s(&model)]);
        knnbox_ok(&train);
        let datastore = dir.join("store");
        knnbox_ok(&["build", "--model", s(&model), "--corpus", s(&extras[0]), "--out", s(&datastore)]);
        let pca_store = dir.join("store_pca");
        knnbox_ok(&["pca", "--datastore", s(&datastore), "--dim", "32", "--out", s(&pca_store)]);
        let pca = pca_store.join("pca.bin");
        let pruned = dir.join("store_pca_margin");
        let prune_line = knnbox_ok(&[
            "prune",
            "--datastore",
            s(&pca_store),
            "--method",
            "margin",
            "--rank",
            "1",
            "--model",
            s(&model),
            "--corpus",
            s(&extras[0]),
            "--out",
            s(&pruned),
        ])
        .remove(0);
        let ivf = dir.join("ivf.bin");
        knnbox_ok(&["ivf", "--datastore", s(&datastore), "--nlist", "16", "--nprobe", "16", "--out", s(&ivf)]);
        Self {
            dir,
            model,
            datastore,
            pca_store,
            pca,
            pruned,
            prune_line,
            ivf,
        }
    }
}

/// First source sentence of a bundled split.
pub fn first_source(a: &Artifacts, split: &str) -> String {
    let text = std::fs::read_to_string(a.corpus(split)).unwrap();
    text.lines().next().unwrap().split('\t').next().unwrap().to_string()
}
