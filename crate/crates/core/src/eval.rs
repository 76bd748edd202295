//! Few-shot multiple-choice evaluation.
//!
//! A prompt is `k` solved training pairs followed by the query, each
//! rendered through the dataset template. Every option is scored by its
//! mean per-token log-likelihood given the prompt and the prediction is the
//! best-scoring option (lowest index on exact ties).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ForwardOptions, ModelWeights, PruneMask};
use crate::tensor::{log_softmax_row, Tensor};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub query: String,
    pub options: Vec<String>,
    pub gold: usize,
}

impl EvalExample {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 {
            return Err(Error::Data(format!(
                "example {:?} has {} options, need at least 2",
                self.query,
                self.options.len()
            )));
        }
        if self.gold >= self.options.len() {
            return Err(Error::Data(format!(
                "gold index {} out of range for {} options",
                self.gold,
                self.options.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPair {
    pub input: String,
    pub output: String,
}

/// Format strings: `pair` uses `{input}`/`{output}`, `query` uses `{query}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub pair: String,
    pub query: String,
}

impl Default for Template {
    fn default() -> Self {
        Self {
            pair: "{input} {output}".into(),
            query: "{query}".into(),
        }
    }
}

impl Template {
    /// Template file: first line is the pair template, second the query template.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let pair = lines.next().unwrap_or_default().to_owned();
        let query = lines.next().unwrap_or_default().to_owned();
        if !pair.contains("{input}") || !pair.contains("{output}") {
            return Err(Error::Data(
                "template line 1 must contain {input} and {output}".into(),
            ));
        }
        if !query.contains("{query}") {
            return Err(Error::Data("template line 2 must contain {query}".into()));
        }
        Ok(Self { pair, query })
    }

    pub fn render_pair(&self, pair: &TrainPair) -> String {
        self.pair
            .replace("{input}", &pair.input)
            .replace("{output}", &pair.output)
    }

    pub fn render_query(&self, query: &str) -> String {
        self.query.replace("{query}", query)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDataset {
    pub name: String,
    pub train: Vec<TrainPair>,
    pub eval: Vec<EvalExample>,
    pub template: Template,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))
        })
        .collect()
}

#[derive(Deserialize)]
struct RawExample {
    query: String,
    options: Vec<String>,
    gold: usize,
}

impl EvalDataset {
    pub fn new(name: impl Into<String>, train: Vec<TrainPair>, eval: Vec<EvalExample>, template: Template) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            train,
            eval,
            template,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval.is_empty() {
            return Err(Error::Data(format!("dataset {} has no evaluation examples", self.name)));
        }
        self.eval.iter().try_for_each(EvalExample::validate)
    }

    /// Load a dataset: `eval` is JSON lines with `query`, `options`, `gold`;
    /// the optional `train` file holds `input`/`output` lines.
    pub fn load(name: &str, eval: &Path, train: Option<&Path>, template: Option<&Path>) -> Result<Self> {
        let examples = read_jsonl::<RawExample>(eval)?
            .into_iter()
            .map(|r| EvalExample {
                query: r.query,
                options: r.options,
                gold: r.gold,
            })
            .collect();
        let train = match train {
            Some(p) => read_jsonl::<TrainPair>(p)?,
            None => Vec::new(),
        };
        let template = match template {
            Some(p) => Template::parse(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Template::default(),
        };
        Self::new(name, train, examples, template)
    }

    pub fn eval_jsonl(&self) -> String {
        let mut s = String::new();
        for ex in &self.eval {
            s.push_str(&serde_json::to_string(ex).expect("plain struct"));
            s.push('\n');
        }
        s
    }

    pub fn train_jsonl(&self) -> String {
        let mut s = String::new();
        for p in &self.train {
            s.push_str(&serde_json::to_string(p).expect("plain struct"));
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotSetting {
    pub k: usize,
    pub sampling_seed: u64,
}

impl ShotSetting {
    pub fn new(k: usize, sampling_seed: u64) -> Self {
        Self { k, sampling_seed }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Per-example seed derived from the shot seed and the example index.
pub fn example_seed(sampling_seed: u64, index: usize) -> u64 {
    splitmix64(sampling_seed ^ splitmix64(index as u64))
}

/// Indices of the `k` in-context training pairs for example `index`.
pub fn sample_shots(train_len: usize, shots: ShotSetting, index: usize) -> Result<Vec<usize>> {
    if shots.k > train_len {
        return Err(Error::Config(format!(
            "{} in-context examples requested but the train split has {train_len}",
            shots.k
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(example_seed(shots.sampling_seed, index));
    let mut idx: Vec<usize> = (0..train_len).collect();
    let (chosen, _) = idx.partial_shuffle(&mut rng, shots.k);
    Ok(chosen.to_vec())
}

/// Rendered prompt text for example `index`.
pub fn render_prompt(dataset: &EvalDataset, index: usize, shots: ShotSetting) -> Result<String> {
    let example = dataset
        .eval
        .get(index)
        .ok_or_else(|| Error::Usage(format!("example {index} out of range")))?;
    let mut parts: Vec<String> = sample_shots(dataset.train.len(), shots, index)?
        .into_iter()
        .map(|i| dataset.template.render_pair(&dataset.train[i]))
        .collect();
    parts.push(dataset.template.render_query(&example.query));
    Ok(parts.join("\n"))
}

pub fn build_prompt(dataset: &EvalDataset, vocab: &Vocab, index: usize, shots: ShotSetting) -> Result<Vec<u32>> {
    vocab.encode(&render_prompt(dataset, index, shots)?)
}

/// A tokenized example ready for scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub index: usize,
    pub prompt: Vec<u32>,
    pub options: Vec<Vec<u32>>,
    pub gold: usize,
}

impl PreparedExample {
    /// `[prompt; option]` for the gold option.
    pub fn gold_sequence(&self) -> Vec<u32> {
        let mut seq = self.prompt.clone();
        seq.extend_from_slice(&self.options[self.gold]);
        seq
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedExample {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub name: String,
    pub shots: ShotSetting,
    pub examples: Vec<PreparedExample>,
    pub skipped: Vec<SkippedExample>,
}

/// Tokenize every example; ones whose prompt plus longest option would not
/// fit in `max_seq_len` are skipped and reported, never truncated.
pub fn prepare_dataset(dataset: &EvalDataset, vocab: &Vocab, shots: ShotSetting, max_seq_len: usize) -> Result<PreparedDataset> {
    dataset.validate()?;
    sample_shots(dataset.train.len(), shots, 0)?;
    let mut examples = Vec::new();
    let mut skipped = Vec::new();
    for (index, ex) in dataset.eval.iter().enumerate() {
        let prompt = build_prompt(dataset, vocab, index, shots)?;
        let options = ex
            .options
            .iter()
            .map(|o| vocab.encode(o))
            .collect::<Result<Vec<_>>>()?;
        if let Some(i) = options.iter().position(Vec::is_empty) {
            return Err(Error::Input(format!("example {index}: option {i} tokenizes to nothing")));
        }
        if prompt.is_empty() {
            return Err(Error::Input(format!("example {index}: empty prompt")));
        }
        let longest = options.iter().map(Vec::len).max().unwrap_or(0);
        if prompt.len() + longest > max_seq_len {
            log::warn!(
                "{}: skipping example {index}, {} prompt + {longest} option tokens exceed {max_seq_len}",
                dataset.name,
                prompt.len()
            );
            skipped.push(SkippedExample {
                index,
                reason: format!(
                    "prompt ({}) + longest option ({longest}) exceeds max_seq_len {max_seq_len}",
                    prompt.len()
                ),
            });
            continue;
        }
        examples.push(PreparedExample {
            index,
            prompt,
            options,
            gold: ex.gold,
        });
    }
    Ok(PreparedDataset {
        name: dataset.name.clone(),
        shots,
        examples,
        skipped,
    })
}

/// Mean log-probability of `tokens[prompt_len..]` under `logits` of the
/// full sequence.
pub fn suffix_mean_logprob(logits: &Tensor, tokens: &[u32], prompt_len: usize) -> f64 {
    let n = tokens.len() - prompt_len;
    let total: f64 = (prompt_len..tokens.len())
        .map(|t| log_softmax_row(logits.row(t - 1))[tokens[t] as usize])
        .sum();
    total / n as f64
}

/// `(1/T_y) Σ log p(y_j | x, y_<j)` from one forward pass over `[x; y]`.
pub fn option_loglikelihood(
    weights: &ModelWeights,
    mask: Option<&PruneMask>,
    prompt: &[u32],
    option: &[u32],
) -> Result<f64> {
    if option.is_empty() {
        return Err(Error::Input("empty option".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Input("empty prompt".into()));
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(option);
    let trace = forward(weights, mask, &seq, &ForwardOptions::default())?;
    let ll = suffix_mean_logprob(&trace.logits, &seq, prompt.len());
    if !ll.is_finite() {
        return Err(Error::Numerical("non-finite option log-likelihood".into()));
    }
    Ok(ll)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExampleRecord {
    pub index: usize,
    pub scores: Vec<f64>,
    pub prediction: usize,
    pub gold: usize,
    pub correct: bool,
    /// The winning score was shared by more than one option.
    pub tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub dataset: String,
    pub shots: ShotSetting,
    pub accuracy: f64,
    pub evaluated: usize,
    pub records: Vec<ExampleRecord>,
    pub skipped: Vec<SkippedExample>,
}

/// Highest score wins; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> (usize, bool) {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    let tie = scores
        .iter()
        .enumerate()
        .any(|(i, &s)| i != best && s == scores[best]);
    (best, tie)
}

pub fn score_example(weights: &ModelWeights, mask: Option<&PruneMask>, ex: &PreparedExample) -> Result<ExampleRecord> {
    // Logit rows depend only on earlier tokens, so every single-token option
    // can be read off one forward pass over the prompt.
    let mut last_row = None;
    let mut scores = Vec::with_capacity(ex.options.len());
    for o in &ex.options {
        let s = if o.len() == 1 {
            if last_row.is_none() {
                let trace = forward(weights, mask, &ex.prompt, &ForwardOptions::default())?;
                last_row = Some(log_softmax_row(trace.logits.row(ex.prompt.len() - 1)));
            }
            let ll = last_row.as_ref().expect("computed above")[o[0] as usize];
            if !ll.is_finite() {
                return Err(Error::Numerical("non-finite option log-likelihood".into()));
            }
            ll
        } else {
            option_loglikelihood(weights, mask, &ex.prompt, o)?
        };
        scores.push(s);
    }
    let (prediction, tie) = argmax_first(&scores);
    Ok(ExampleRecord {
        index: ex.index,
        scores,
        prediction,
        gold: ex.gold,
        correct: prediction == ex.gold,
        tie,
    })
}

pub fn evaluate_accuracy(weights: &ModelWeights, mask: Option<&PruneMask>, data: &PreparedDataset) -> Result<EvalReport> {
    if data.examples.is_empty() {
        return Err(Error::Evaluation(format!(
            "{}: every example was skipped ({} total)",
            data.name,
            data.skipped.len()
        )));
    }
    let records = data
        .examples
        .par_iter()
        .map(|ex| score_example(weights, mask, ex))
        .collect::<Result<Vec<_>>>()?;
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        dataset: data.name.clone(),
        shots: data.shots,
        accuracy: correct as f64 / records.len() as f64,
        evaluated: records.len(),
        records,
        skipped: data.skipped.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn toy_dataset(train: usize) -> EvalDataset {
        let train = (0..train)
            .map(|i| TrainPair {
                input: format!("w{i}"),
                output: format!("w{}", i + 1),
            })
            .collect();
        let eval = (0..3)
            .map(|i| EvalExample {
                query: format!("w{i}"),
                options: vec!["w1".into(), "w2".into()],
                gold: i % 2,
            })
            .collect();
        EvalDataset::new("toy", train, eval, Template::default()).unwrap()
    }

    #[test]
    fn zero_shot_prompt_is_the_query() {
        let ds = toy_dataset(4);
        assert_eq!(render_prompt(&ds, 2, ShotSetting::new(0, 9)).unwrap(), "w2");
    }

    #[test]
    fn single_train_pair_is_always_chosen() {
        let ds = toy_dataset(1);
        for i in 0..3 {
            assert_eq!(render_prompt(&ds, i, ShotSetting::new(1, i as u64)).unwrap(), format!("w0 w1\nw{i}"));
        }
    }

    #[test]
    fn sampling_is_deterministic_and_without_replacement() {
        let a = sample_shots(10, ShotSetting::new(5, 42), 3).unwrap();
        let b = sample_shots(10, ShotSetting::new(5, 42), 3).unwrap();
        assert_eq!(a, b);
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 5);
        assert!(sample_shots(3, ShotSetting::new(4, 0), 0).is_err());
    }

    #[test]
    fn template_parsing() {
        let t = Template::parse("Q: {input} A: {output}\nQ: {query} A:\n").unwrap();
        assert_eq!(
            t.render_pair(&TrainPair { input: "x".into(), output: "y".into() }),
            "Q: x A: y"
        );
        assert_eq!(t.render_query("z"), "Q: z A:");
        assert!(Template::parse("{input}\n{query}").is_err());
    }

    #[test]
    fn ties_go_to_lowest_index() {
        assert_eq!(argmax_first(&[0.1, 0.5, 0.5]), (1, true));
        assert_eq!(argmax_first(&[-1.0, -2.0]), (0, false));
    }

    #[test]
    fn example_validation() {
        let ex = EvalExample { query: "q".into(), options: vec!["a".into()], gold: 0 };
        assert!(ex.validate().is_err());
        let ex = EvalExample { query: "q".into(), options: vec!["a".into(), "b".into()], gold: 2 };
        assert!(ex.validate().is_err());
        assert!(EvalDataset::new("e", vec![], vec![], Template::default()).is_err());
    }

    #[test]
    fn shared_prompt_pass_matches_full_sequence() {
        let cfg = ModelConfig {
            num_layers: 2,
            heads_per_layer: 2,
            embed_dim: 8,
            head_dim: 4,
            ffn_dim: 6,
            vocab_size: 11,
            max_seq_len: 12,
        };
        let w = ModelWeights::random(cfg, 3, 0.5).unwrap();
        let mut mask = PruneMask::full(&cfg);
        mask.set_head(1, 0, false);
        let ex = PreparedExample {
            index: 0,
            prompt: vec![3, 1, 4, 1, 5],
            options: vec![vec![9], vec![2, 6], vec![5]],
            gold: 0,
        };
        for m in [None, Some(&mask)] {
            let rec = score_example(&w, m, &ex).unwrap();
            for (o, s) in ex.options.iter().zip(&rec.scores) {
                assert_eq!(*s, option_loglikelihood(&w, m, &ex.prompt, o).unwrap());
            }
        }
    }
}
