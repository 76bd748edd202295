//! One function per subcommand. Each reads from [`Inputs`] and writes
//! through [`Outputs`] under `{command}/{task}/{shots}/`.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{Inputs, RunConfig};
use super::output::Outputs;
use crate::error::{Error, Result};
use crate::eval::{evaluate_accuracy, prepare_dataset, EvalDataset, PreparedDataset, ShotSetting};
use crate::importance::{aggregate_importance, builtin_methods, ranking_from, ComponentKind, ImportanceMatrix, Ranking};
use crate::induction::{builtin_scorers, capacity_curve, InductionOptions, RankedVocab};
use crate::io::{csv_string, read_text, to_json};
use crate::pruning::{prune_curve, PrunePlan, PruneTarget};
use crate::stats::{topk_overlap, CorrelationReport, CrossShotSummary};

pub const SCORE_HEADS: &str = "score-heads";
pub const SCORE_FFNS: &str = "score-ffns";

/// A JSON body tagged with the checkpoint it came from.
#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    checkpoint_digest: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn document<T: Serialize>(inp: &Inputs, body: &T) -> String {
    to_json(&Document {
        checkpoint_digest: &inp.checkpoint_digest,
        body,
    })
}

fn prepare(inp: &Inputs, ds: &EvalDataset, k: usize) -> Result<PreparedDataset> {
    let shots = ShotSetting::new(k, inp.config.seeds.sampling);
    prepare_dataset(ds, &inp.vocab, shots, inp.weights.config.max_seq_len)
}

/// Run `f` for one `(task, shots)` unit, flagging the unit on failure.
fn unit<T>(out: &mut Outputs, task: &str, k: usize, f: impl FnOnce(&mut Outputs) -> Result<T>) -> Result<T> {
    f(out).inspect_err(|e| out.fail(&[task, &k.to_string()], e))
}

pub fn cmd_eval(inp: &Inputs, out: &mut Outputs) -> Result<()> {
    inp.config.require_datasets()?;
    let mut rows = Vec::new();
    for &k in &inp.config.shots {
        for ds in &inp.datasets {
            let report = unit(out, &ds.name, k, |out| {
                let report = evaluate_accuracy(&inp.weights, None, &prepare(inp, ds, k)?)?;
                out.write(&[&ds.name, &k.to_string(), "report.json"], &document(inp, &report))?;
                Ok(report)
            })?;
            log::info!("{} {k}-shot accuracy {}", ds.name, report.accuracy);
            rows.push(vec![
                ds.name.clone(),
                k.to_string(),
                report.accuracy.to_string(),
                report.evaluated.to_string(),
                report.skipped.len().to_string(),
            ]);
        }
    }
    out.write(&["accuracy.csv"], &csv_string(&["task", "shots", "accuracy", "evaluated", "skipped"], rows)?)
}

fn write_matrix(inp: &Inputs, out: &mut Outputs, m: &ImportanceMatrix) -> Result<()> {
    let k = m.shots.to_string();
    out.write(&[&m.task, &k, "importance.csv"], &m.to_csv()?)?;
    out.write(&[&m.task, &k, "importance.json"], &document(inp, m))
}

fn score_components(inp: &Inputs, out: &mut Outputs, method: &str, kind: ComponentKind) -> Result<()> {
    inp.config.require_datasets()?;
    let methods = builtin_methods();
    let scorer = methods.get(method)?;
    if scorer.kind() != kind {
        return Err(Error::Usage(format!(
            "method {method:?} scores {}s, not {}s",
            scorer.kind().as_str(),
            kind.as_str()
        )));
    }
    for &k in &inp.config.shots {
        let mut matrices = Vec::with_capacity(inp.datasets.len());
        for ds in &inp.datasets {
            let m = unit(out, &ds.name, k, |out| {
                let m = scorer.score(&inp.weights, &prepare(inp, ds, k)?)?;
                write_matrix(inp, out, &m)?;
                Ok(m)
            })?;
            matrices.push(m);
        }
        let agg = unit(out, "aggregate", k, |_| aggregate_importance(&matrices))?;
        write_matrix(inp, out, &agg)?;
    }
    Ok(())
}

pub fn cmd_score_heads(inp: &Inputs, out: &mut Outputs) -> Result<()> {
    score_components(inp, out, &inp.config.importance.head_method, ComponentKind::Head)
}

pub fn cmd_score_ffns(inp: &Inputs, out: &mut Outputs) -> Result<()> {
    score_components(inp, out, "oracle-ffn", ComponentKind::Ffn)
}

/// Where `command` left the importance matrix of `source` at `k` shots.
pub fn importance_path(root: &Path, command: &str, source: &str, k: usize) -> PathBuf {
    root.join(command).join(source).join(k.to_string()).join("importance.csv")
}

/// Read an importance CSV that must hold `kind` scores shaped like the model.
pub fn load_matrix(inp: &Inputs, path: &Path, kind: ComponentKind, task: &str, k: usize) -> Result<ImportanceMatrix> {
    if !path.is_file() {
        return Err(Error::Usage(format!("ranking file {} does not exist", path.display())));
    }
    let text = read_text(path)?;
    let found = ImportanceMatrix::csv_kind(&text)?;
    if found != kind {
        return Err(Error::Usage(format!(
            "{} holds {} scores where {} scores are required",
            path.display(),
            found.as_str(),
            kind.as_str()
        )));
    }
    let m = ImportanceMatrix::from_csv(&text, kind, task, k)?;
    if !m.matches(&inp.weights.config) {
        return Err(Error::Usage(format!("{} does not match the model's shape", path.display())));
    }
    Ok(m)
}

/// A ranking source is `self`, a task or `aggregate` produced by an
/// earlier scoring command, or a path to an importance CSV.
fn resolve_source(inp: &Inputs, source: &str, task: &str, k: usize, kind: ComponentKind) -> Result<(String, Ranking)> {
    let root = inp.output_dir();
    let (label, path) = if source.ends_with(".csv") {
        let path = inp.base.join(source);
        let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("file").to_owned();
        (label, path)
    } else {
        let name = if source == "self" { task } else { source };
        let command = match kind {
            ComponentKind::Head => SCORE_HEADS,
            ComponentKind::Ffn => SCORE_FFNS,
        };
        (source.to_owned(), importance_path(&root, command, name, k))
    };
    Ok((label, ranking_from(&load_matrix(inp, &path, kind, task, k)?)))
}

pub fn cmd_prune(inp: &Inputs, out: &mut Outputs) -> Result<()> {
    let cfg = &inp.config;
    cfg.require_datasets()?;
    if cfg.prune.rankings.is_empty() {
        return Err(Error::Usage("prune.rankings is empty".into()));
    }
    let target = cfg.prune.target;
    let ffn_fractions = cfg.prune.ffn_fractions.clone().unwrap_or_else(|| cfg.fractions.clone());
    // Resolve every plan before evaluating anything.
    let mut jobs = Vec::new();
    for &k in &cfg.shots {
        for ds in &inp.datasets {
            for source in &cfg.prune.rankings {
                let head = || resolve_source(inp, source, &ds.name, k, ComponentKind::Head);
                let ffn = || resolve_source(inp, source, &ds.name, k, ComponentKind::Ffn);
                let (label, plan) = match target {
                    PruneTarget::Heads => {
                        let (label, ranking) = head()?;
                        let fractions = cfg.fractions.clone();
                        (label, PrunePlan::Heads { ranking, fractions })
                    }
                    PruneTarget::Ffns => {
                        let (label, ranking) = ffn()?;
                        let fractions = ffn_fractions.clone();
                        (label, PrunePlan::Ffns { ranking, fractions })
                    }
                    PruneTarget::Both => {
                        let (label, heads) = head()?;
                        let (_, ffns) = ffn()?;
                        let plan = PrunePlan::Both {
                            heads,
                            ffns,
                            head_fractions: cfg.fractions.clone(),
                            ffn_fractions: ffn_fractions.clone(),
                        };
                        (label, plan)
                    }
                };
                jobs.push((k, ds, label, plan));
            }
        }
    }
    let target_name = serde_json::to_value(target).expect("enum serializes");
    let target_name = target_name.as_str().expect("unit variant");
    for (k, ds, label, plan) in jobs {
        unit(out, &ds.name, k, |out| {
            let curve = prune_curve(&inp.weights, &prepare(inp, ds, k)?, &plan, &label)?;
            let base = format!("{target_name}-{label}");
            let kd = k.to_string();
            out.write(&[&ds.name, &kd, &format!("{base}.csv")], &curve.to_csv()?)?;
            out.write(&[&ds.name, &kd, &format!("{base}.json")], &document(inp, &curve))
        })?;
    }
    Ok(())
}

/// Head-importance sources under `score-heads`, as `(source, shots)`.
fn discover_head_sources(root: &Path, shots: &[usize]) -> Vec<(String, usize)> {
    let Ok(entries) = std::fs::read_dir(root.join(SCORE_HEADS)) else {
        return Vec::new();
    };
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    let mut found = Vec::new();
    for name in names {
        for &k in shots {
            if importance_path(root, SCORE_HEADS, &name, k).is_file() {
                found.push((name.clone(), k));
            }
        }
    }
    found
}

pub fn cmd_induction(inp: &Inputs, out: &mut Outputs) -> Result<()> {
    let cfg = &inp.config;
    let sec = &cfg.induction;
    let root = inp.output_dir();
    let sources = match &sec.rankings {
        Some(list) => list
            .iter()
            .flat_map(|s| cfg.shots.iter().map(move |&k| (s.clone(), k)))
            .collect(),
        None => discover_head_sources(&root, &cfg.shots),
    };
    let rankings = sources
        .into_iter()
        .map(|(source, k)| {
            let path = importance_path(&root, SCORE_HEADS, &source, k);
            let m = load_matrix(inp, &path, ComponentKind::Head, &source, k)?;
            Ok((source, k, ranking_from(&m)))
        })
        .collect::<Result<Vec<_>>>()?;
    let opts = InductionOptions {
        num_sequences: sec.num_sequences,
        exclude_frac: sec.exclude_frac,
        schedule: sec.schedule,
        seed: cfg.seeds.induction,
    };
    let vocab = RankedVocab::from_vocab(&inp.vocab);
    let scorers = builtin_scorers();
    for name in scorers.names() {
        let scores = crate::induction::induction_scores(scorers.get(name)?, &inp.weights, &vocab, &opts)
            .inspect_err(|e| out.fail(&[&format!("{name}.csv")], e))?;
        out.write(&[&format!("{name}.csv")], &scores.to_csv()?)?;
        out.write(&[&format!("{name}.json")], &document(inp, &scores))?;
        for (source, k, ranking) in &rankings {
            let curve = capacity_curve(&scores, ranking, &sec.fractions, source)?;
            let kd = k.to_string();
            out.write(&[source, &kd, &format!("capacity-{name}.csv")], &curve.to_csv()?)?;
            out.write(&[source, &kd, &format!("capacity-{name}.json")], &document(inp, &curve))?;
        }
    }
    Ok(())
}

fn write_report(out: &mut Outputs, dir: &[&str], report: &CorrelationReport) -> Result<()> {
    let at = |file: &'static str| dir.iter().copied().chain([file]).collect::<Vec<_>>();
    out.write(&at("rho.csv"), &report.rho_csv()?)?;
    out.write(&at("p_value.csv"), &report.p_value_csv()?)?;
    out.write(&at("report.json"), &to_json(report))
}

pub fn cmd_correlate(inp: &Inputs, out: &mut Outputs) -> Result<()> {
    let cfg = &inp.config;
    cfg.require_datasets()?;
    let cross_task = inp.datasets.len() >= 2;
    let cross_shot = cfg.shots.len() >= 2;
    if !cross_task && !cross_shot {
        return Err(Error::Usage("correlate needs at least two tasks or two shot settings".into()));
    }
    let root = inp.output_dir();
    // matrices[k][t]
    let matrices = cfg
        .shots
        .iter()
        .map(|&k| {
            inp.datasets
                .iter()
                .map(|ds| load_matrix(inp, &importance_path(&root, SCORE_HEADS, &ds.name, k), ComponentKind::Head, &ds.name, k))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = inp.datasets.iter().map(|d| d.name.clone()).collect();

    if cross_task {
        for (ki, &k) in cfg.shots.iter().enumerate() {
            let scores: Vec<Vec<f64>> = matrices[ki].iter().map(|m| m.values.clone()).collect();
            let report = CorrelationReport::new(format!("cross-task {k}-shot"), names.clone(), &scores)?;
            let kd = k.to_string();
            write_report(out, &["cross-task", &kd], &report)?;
            let rankings: Vec<Ranking> = matrices[ki].iter().map(ranking_from).collect();
            let mut rows = Vec::new();
            for i in 0..names.len() {
                for j in i + 1..names.len() {
                    let o = topk_overlap(&rankings[i], &rankings[j], cfg.correlate.top_k)?;
                    rows.push(vec![names[i].clone(), names[j].clone(), o.to_string()]);
                }
            }
            out.write(&["cross-task", &kd, "overlap.csv"], &csv_string(&["task_a", "task_b", "overlap"], rows)?)?;
        }
    }
    if cross_shot {
        let shot_names: Vec<String> = cfg.shots.iter().map(|k| k.to_string()).collect();
        let mut reports = Vec::new();
        for (ti, name) in names.iter().enumerate() {
            let scores: Vec<Vec<f64>> = matrices.iter().map(|per_shot| per_shot[ti].values.clone()).collect();
            let report = CorrelationReport::new(format!("{name} cross-shot"), shot_names.clone(), &scores)?;
            write_report(out, &[name, "cross-shot"], &report)?;
            reports.push(report);
        }
        let summary = CrossShotSummary::new(cfg.shots.clone(), names.clone(), &reports)?;
        out.write(&["cross-shot", "summary.csv"], &summary.to_csv()?)?;
        out.write(&["cross-shot", "summary.json"], &to_json(&summary))?;
    }
    Ok(())
}

/// The config `make-fixture` writes next to the fixture files.
pub fn fixture_config(num_sequences: usize) -> RunConfig {
    let mut doc = serde_json::json!({
        "checkpoint": "model.ckpt",
        "vocab": "vocab.txt",
        "datasets": [
            {"name": "first", "eval": "first.jsonl", "train": "first.train.jsonl"},
            {"name": "recall", "eval": "recall.jsonl", "train": "recall.train.jsonl"}
        ],
        "shots": [0, 1],
        "prune": {"rankings": ["self", "aggregate"]},
        "output_dir": "out"
    });
    doc["induction"] = serde_json::json!({ "num_sequences": num_sequences });
    RunConfig::from_value(doc).expect("fixture config is valid")
}
