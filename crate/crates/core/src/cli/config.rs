//! The run configuration: one JSON document, with dotted-path overrides
//! from the command line.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalDataset;
use crate::induction::ScheduleMode;
use crate::io::read_text;
use crate::model::{checkpoint_digest, read_checkpoint, ModelWeights};
use crate::pruning::{default_fractions, validate_fractions, PruneTarget};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: String,
    pub eval: PathBuf,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Few-shot demonstration sampling.
    pub sampling: u64,
    /// Random sequences for induction scoring.
    pub induction: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImportanceSection {
    /// Loss target for gradient importance; only `gold` is supported.
    pub target: String,
    /// Registered head-scoring method.
    pub head_method: String,
}

impl Default for ImportanceSection {
    fn default() -> Self {
        Self {
            target: "gold".into(),
            head_method: "gradient".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub target: PruneTarget,
    /// Ranking sources: `self`, `aggregate`, or another task's name.
    pub rankings: Vec<String>,
    /// FFN grid for combined pruning; the top-level fractions otherwise.
    pub ffn_fractions: Option<Vec<f64>>,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            target: PruneTarget::Heads,
            rankings: vec!["self".into()],
            ffn_fractions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InductionSection {
    pub num_sequences: usize,
    pub exclude_frac: f64,
    pub schedule: ScheduleMode,
    pub fractions: Vec<f64>,
    /// Head-importance sources to draw capacity curves for; every source
    /// found under `score-heads` when unset.
    pub rankings: Option<Vec<String>>,
}

impl Default for InductionSection {
    fn default() -> Self {
        Self {
            num_sequences: 100,
            exclude_frac: 0.04,
            schedule: ScheduleMode::Auto,
            fractions: (0..=10).map(|i| i as f64 / 10.0).collect(),
            rankings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelateSection {
    pub top_k: f64,
}

impl Default for CorrelateSection {
    fn default() -> Self {
        Self { top_k: 0.3 }
    }
}

/// Names with a fixed meaning in ranking sources or the output layout.
pub const RESERVED_NAMES: [&str; 4] = ["aggregate", "self", "cross-task", "cross-shot"];

fn default_shots() -> Vec<usize> {
    vec![0]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Paths are relative to the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    #[serde(default)]
    pub datasets: Vec<DatasetSpec>,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_fractions")]
    pub fractions: Vec<f64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub importance: ImportanceSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub induction: InductionSection,
    #[serde(default)]
    pub correlate: CorrelateSection,
}

/// Set `path` (dotted) in `doc` to `raw`, read as JSON when it parses and
/// as a string otherwise.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut node = doc;
    let mut keys = path.split('.').peekable();
    while let Some(key) = keys.next() {
        if key.is_empty() {
            return Err(Error::Usage(format!("malformed override key {path:?}")));
        }
        let obj = match node {
            Value::Object(map) => map,
            _ => return Err(Error::Usage(format!("override {path:?} descends into a non-object"))),
        };
        if keys.peek().is_none() {
            obj.insert(key.to_owned(), value);
            return Ok(());
        }
        node = obj.entry(key.to_owned()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Split `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::Usage(format!("expected --key, found {arg:?}")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_owned(), v.to_owned())),
            None => {
                let v = it.next().ok_or_else(|| Error::Usage(format!("--{key} needs a value")))?;
                out.push((key.to_owned(), v.clone()));
            }
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_value(doc: Value) -> Result<Self> {
        let cfg: Self = serde_json::from_value(doc).map_err(|e| Error::Usage(format!("run config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Read `path` and apply `overrides` in order.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = read_text(path).map_err(|e| Error::Usage(format!("cannot read run config: {e}")))?;
        let mut doc: Value = serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        for (k, v) in overrides {
            apply_override(&mut doc, k, v)?;
        }
        Self::from_value(doc)
    }

    fn check(&self) -> Result<()> {
        if self.shots.is_empty() {
            return Err(Error::Usage("shots list is empty".into()));
        }
        let mut names = BTreeSet::new();
        for d in &self.datasets {
            if d.name.is_empty() || RESERVED_NAMES.contains(&d.name.as_str()) || d.name.contains(['/', '\\']) {
                return Err(Error::Usage(format!("dataset name {:?} is reserved or not a path component", d.name)));
            }
            if !names.insert(d.name.as_str()) {
                return Err(Error::Usage(format!("dataset {:?} listed twice", d.name)));
            }
        }
        if self.importance.target != "gold" {
            return Err(Error::Usage(format!(
                "importance.target {:?} is not supported; use \"gold\"",
                self.importance.target
            )));
        }
        validate_fractions(&self.fractions)?;
        if let Some(f) = &self.prune.ffn_fractions {
            validate_fractions(f)?;
        }
        if !(0.0..=1.0).contains(&self.induction.exclude_frac) {
            return Err(Error::Usage(format!("induction.exclude_frac {} outside [0, 1]", self.induction.exclude_frac)));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn require_datasets(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Usage("no datasets configured".into()));
        }
        Ok(())
    }
}

/// Everything a command reads, loaded and checked up front.
pub struct Inputs {
    pub config: RunConfig,
    pub base: PathBuf,
    pub weights: ModelWeights,
    pub checkpoint_digest: String,
    pub vocab: Vocab,
    pub datasets: Vec<EvalDataset>,
}

impl Inputs {
    pub fn load(config: RunConfig, base: &Path) -> Result<Self> {
        let resolve = |p: &Path| base.join(p);
        let ckpt = resolve(&config.checkpoint);
        let weights = read_checkpoint(&ckpt)?;
        let digest = checkpoint_digest(&ckpt)?;
        let vocab = Vocab::load(&resolve(&config.vocab))?;
        if vocab.len() != weights.config.vocab_size {
            return Err(Error::Data(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                weights.config.vocab_size
            )));
        }
        let datasets = config
            .datasets
            .iter()
            .map(|d| {
                EvalDataset::load(
                    &d.name,
                    &resolve(&d.eval),
                    d.train.as_deref().map(resolve).as_deref(),
                    d.template.as_deref().map(resolve).as_deref(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base: base.to_path_buf(),
            weights,
            checkpoint_digest: digest,
            vocab,
            datasets,
            config,
        })
    }

    pub fn output_dir(&self) -> PathBuf {
        self.base.join(&self.config.output_dir)
    }
}
