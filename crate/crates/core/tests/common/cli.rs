use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use attn_scalpel::cli::config::{Inputs, RunConfig};
use attn_scalpel::eval::{prepare_dataset, PreparedDataset, ShotSetting};

pub const BIN: &str = env!("CARGO_BIN_EXE_attn-scalpel");

/// A freshly written fixture directory.
pub struct Fixture {
    pub dir: tempfile::TempDir,
}

pub struct Outcome {
    pub code: i32,
    pub stderr: String,
}

impl Fixture {
    pub fn new(eval: usize, num_sequences: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = Command::new(BIN)
            .args(["make-fixture", "--out"])
            .arg(dir.path())
            .args(["--eval", &eval.to_string(), "--train", "8", "--num-sequences", &num_sequences.to_string()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        Self { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn config(&self) -> PathBuf {
        self.path().join("run.json")
    }

    pub fn out(&self) -> PathBuf {
        self.path().join("out")
    }

    pub fn run(&self, command: &str, overrides: &[&str]) -> Outcome {
        let out = Command::new(BIN)
            .arg(command)
            .arg("--config")
            .arg(self.config())
            .args(overrides)
            .env("ATTN_SCALPEL_THREADS", "2")
            .output()
            .unwrap();
        Outcome {
            code: out.status.code().unwrap_or(-1),
            stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
        }
    }

    pub fn ok(&self, command: &str, overrides: &[&str]) {
        let o = self.run(command, overrides);
        assert_eq!(o.code, 0, "{command} failed: {}", o.stderr);
    }

    pub fn read(&self, rel: &str) -> String {
        std::fs::read_to_string(self.out().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }

    /// The inputs the tool itself would load under `overrides`.
    pub fn inputs(&self, overrides: &[(&str, &str)]) -> Inputs {
        let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        Inputs::load(RunConfig::load(&self.config(), &o).unwrap(), self.path()).unwrap()
    }
}

pub fn prepared(inp: &Inputs, task: &str, k: usize) -> PreparedDataset {
    let ds = inp.datasets.iter().find(|d| d.name == task).unwrap();
    prepare_dataset(ds, &inp.vocab, ShotSetting::new(k, inp.config.seeds.sampling), inp.weights.config.max_seq_len).unwrap()
}

/// Data rows of a CSV with a header, as strings.
pub fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_owned).collect()).collect()
}

/// The `score` column of an importance or score file.
pub fn scores(text: &str) -> Vec<f64> {
    csv_rows(text).iter().map(|r| r.last().unwrap().parse().unwrap()).collect()
}

/// Every file under `root`, relative path to contents.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                acc.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

/// The manifest with every `timestamp` field dropped.
pub fn manifest_without_timestamps(bytes: &[u8]) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
    for (_, rec) in v["commands"].as_object_mut().unwrap() {
        rec.as_object_mut().unwrap().remove("timestamp");
    }
    v
}
