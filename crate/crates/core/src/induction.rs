//! Prefix-matching and copying scores on random unique-token sequences.
//!
//! A prefix-matching sequence is `L` distinct tokens repeated four times; a
//! head scores by attending from each repeated token to the token that
//! followed its earlier occurrences. A copying sequence is `4L` distinct
//! tokens fed straight through one head; the head scores by raising the
//! vocabulary probability of the token it attends to most, relative to the
//! other tokens it could have attended to.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::example_seed;
use crate::importance::{ComponentKind, Ranking};
use crate::io::{csv_string, parse_csv, parse_field};
use crate::model::{forward, head_contribution_from_normed, ForwardOptions, ModelWeights, PerHead};
use crate::pruning::removal_count;
use crate::registry::Registry;
use crate::tensor::{layer_norm, Tensor};
use crate::tokenizer::Vocab;

/// Token ids in descending corpus frequency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankedVocab {
    ids: Vec<u32>,
}

impl RankedVocab {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Data("ranked vocabulary repeats a token".into()));
        }
        Ok(Self { ids })
    }

    /// Every id of a vocabulary file, in file order.
    pub fn from_vocab(vocab: &Vocab) -> Self {
        Self {
            ids: (0..vocab.len() as u32).collect(),
        }
    }

    /// Ids `0..size`, for models without a vocabulary file.
    pub fn identity(size: usize) -> Self {
        Self {
            ids: (0..size as u32).collect(),
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Drop `⌊exclude_frac·size⌋` tokens from each end of the ranking.
pub fn filtered_vocab(vocab: &RankedVocab, exclude_frac: f64) -> Result<Vec<u32>> {
    if !(0.0..0.5).contains(&exclude_frac) {
        return Err(Error::Config(format!("exclude_frac {exclude_frac} outside [0, 0.5)")));
    }
    let n = vocab.len();
    let cut = (exclude_frac * n as f64 + 1e-9).floor() as usize;
    if 2 * cut >= n {
        return Err(Error::Config(format!(
            "vocabulary of {n} tokens is empty after excluding {cut} from each end"
        )));
    }
    Ok(vocab.ids[cut..n - cut].to_vec())
}

/// `len` distinct tokens drawn uniformly from `vocab`.
pub fn random_unique_sequence(vocab: &[u32], len: usize, seed: u64) -> Result<Vec<u32>> {
    if len > vocab.len() {
        return Err(Error::Config(format!(
            "sequence of {len} unique tokens needs a larger vocabulary than {}",
            vocab.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = vocab.to_vec();
    let (chosen, _) = pool.partial_shuffle(&mut rng, len);
    Ok(chosen.to_vec())
}

/// Attention placed on the successor of every earlier occurrence of each
/// token, summed and divided by the number of positions after the first
/// `unique_len`.
pub fn prefix_matching_score(attention: &Tensor, tokens: &[u32], unique_len: usize) -> f64 {
    let n = tokens.len();
    if n <= unique_len {
        return 0.0;
    }
    let mut total = 0.0;
    for t in unique_len..n {
        let row = attention.row(t);
        for p in 0..t {
            if tokens[p] == tokens[t] {
                total += row[p + 1];
            }
        }
    }
    total / (n - unique_len) as f64
}

/// Index of the largest entry in the causal part of row `t`, earliest on ties.
pub fn max_attended(attention: &Tensor, t: usize) -> usize {
    let row = &attention.row(t)[..=t];
    let mut best = 0;
    for (i, &a) in row.iter().enumerate() {
        if a > row[best] {
            best = i;
        }
    }
    best
}

/// Copying contribution at position `t`: the ReLU-raised probability of the
/// max-attended token as a share of all ReLU-raised probabilities over the
/// tokens strictly before `t`. Zero when nothing is raised.
pub fn copying_contribution(attention: &Tensor, probs: &Tensor, tokens: &[u32], t: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    let target = max_attended(attention, t);
    let row = probs.row(t);
    let attendable: Vec<f64> = tokens[..t].iter().map(|&tok| row[tok as usize]).collect();
    let mean = attendable.iter().sum::<f64>() / t as f64;
    let raised: Vec<f64> = attendable.iter().map(|p| (p - mean).max(0.0)).collect();
    let denom: f64 = raised.iter().sum();
    if target >= t || denom <= 0.0 {
        return 0.0;
    }
    raised[target] / denom
}

/// Mean copying contribution over every position of the sequence.
pub fn copying_score(attention: &Tensor, probs: &Tensor, tokens: &[u32]) -> f64 {
    if tokens.is_empty() {
        return 0.0;
    }
    let total: f64 = (0..tokens.len())
        .map(|t| copying_contribution(attention, probs, tokens, t))
        .sum();
    total / tokens.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InductionKind {
    PrefixMatching,
    Copying,
}

impl InductionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InductionKind::PrefixMatching => "prefix_matching",
            InductionKind::Copying => "copying",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleMode {
    /// Unscaled lengths `2·s + 23`; an error if they do not fit.
    Fixed,
    /// Unscaled when they fit, otherwise shrunk to the context window.
    Auto,
}

/// Base lengths `L_s` for sequence seeds `s = 1..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthSchedule {
    pub mode: ScheduleMode,
    /// Factor applied to the unscaled lengths; 1 when unscaled.
    pub scale: f64,
    pub base_lengths: Vec<usize>,
}

impl LengthSchedule {
    /// Lengths such that `4·L_s` fits `max_seq_len` for every `s`.
    pub fn new(mode: ScheduleMode, num_sequences: usize, max_seq_len: usize) -> Result<Self> {
        if num_sequences == 0 {
            return Err(Error::Config("num_sequences must be positive".into()));
        }
        let longest = 4 * (2 * num_sequences + 23);
        let (scale, base_lengths) = if longest <= max_seq_len {
            (1.0, (1..=num_sequences).map(|s| 2 * s + 23).collect::<Vec<_>>())
        } else if mode == ScheduleMode::Fixed {
            return Err(Error::Config(format!(
                "sequence length {longest} (seed {num_sequences}) exceeds max_seq_len {max_seq_len}"
            )));
        } else {
            let r = max_seq_len as f64 / longest as f64;
            let lengths = (1..=num_sequences)
                .map(|s| (2.0 * s as f64 * r).floor() as usize + (23.0 * r).floor() as usize)
                .collect();
            (r, lengths)
        };
        if let Some(s) = base_lengths.iter().position(|&l| l < 2) {
            return Err(Error::Config(format!(
                "max_seq_len {max_seq_len} leaves seed {} a length of {} tokens, need 2",
                s + 1,
                base_lengths[s]
            )));
        }
        Ok(Self {
            mode,
            scale,
            base_lengths,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionOptions {
    pub num_sequences: usize,
    pub exclude_frac: f64,
    pub schedule: ScheduleMode,
    /// Mixed with the sequence index to seed each sequence.
    pub seed: u64,
}

impl Default for InductionOptions {
    fn default() -> Self {
        Self {
            num_sequences: 100,
            exclude_frac: 0.04,
            schedule: ScheduleMode::Auto,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionScoreMatrix {
    pub kind: InductionKind,
    pub layers: usize,
    pub heads: usize,
    pub values: Vec<f64>,
    pub num_sequences: usize,
    pub schedule: LengthSchedule,
}

impl InductionScoreMatrix {
    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[layer * self.heads + head]
    }

    /// `layer,head,score`.
    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &["layer", "head", "score"],
            (0..self.values.len()).map(|i| {
                vec![(i / self.heads).to_string(), (i % self.heads).to_string(), self.values[i].to_string()]
            }),
        )
    }
}

/// One way of scoring every head on one sequence.
pub trait InductionScorer: Send + Sync {
    fn kind(&self) -> InductionKind;

    /// Token sequence for base length `base_len`.
    fn sequence(&self, vocab: &[u32], base_len: usize, seed: u64) -> Result<Vec<u32>>;

    /// Score of every head, row-major.
    fn score_sequence(&self, weights: &ModelWeights, tokens: &[u32]) -> Result<Vec<f64>>;
}

pub struct PrefixMatching;

impl InductionScorer for PrefixMatching {
    fn kind(&self) -> InductionKind {
        InductionKind::PrefixMatching
    }

    fn sequence(&self, vocab: &[u32], base_len: usize, seed: u64) -> Result<Vec<u32>> {
        Ok(random_unique_sequence(vocab, base_len, seed)?.repeat(4))
    }

    fn score_sequence(&self, weights: &ModelWeights, tokens: &[u32]) -> Result<Vec<f64>> {
        let trace = forward(weights, None, tokens, &ForwardOptions::with_attention())?;
        let attention = trace.attention.expect("attention was requested");
        let unique = tokens.len() / 4;
        Ok(attention
            .iter()
            .map(|(_, a)| prefix_matching_score(a.as_ref().expect("unmasked head"), tokens, unique))
            .collect())
    }
}

pub struct Copying;

impl InductionScorer for Copying {
    fn kind(&self) -> InductionKind {
        InductionKind::Copying
    }

    fn sequence(&self, vocab: &[u32], base_len: usize, seed: u64) -> Result<Vec<u32>> {
        random_unique_sequence(vocab, 4 * base_len, seed)
    }

    fn score_sequence(&self, weights: &ModelWeights, tokens: &[u32]) -> Result<Vec<f64>> {
        let cfg = &weights.config;
        let x = weights.embed(tokens)?;
        let mut out = Vec::with_capacity(cfg.num_heads());
        for (l, lw) in weights.layers.iter().enumerate() {
            let normed = layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias)?;
            for h in 0..cfg.heads_per_layer {
                let c = head_contribution_from_normed(weights, l, h, &normed)?;
                out.push(copying_score(&c.attention, &c.probs, tokens));
            }
        }
        Ok(out)
    }
}

pub fn builtin_scorers() -> Registry<dyn InductionScorer> {
    let mut r: Registry<dyn InductionScorer> = Registry::new("induction scorer");
    r.register(InductionKind::PrefixMatching.as_str(), Box::new(PrefixMatching));
    r.register(InductionKind::Copying.as_str(), Box::new(Copying));
    r
}

/// Mean per-head score of `scorer` over the scheduled sequences.
pub fn induction_scores(
    scorer: &dyn InductionScorer,
    weights: &ModelWeights,
    vocab: &RankedVocab,
    opts: &InductionOptions,
) -> Result<InductionScoreMatrix> {
    let cfg = &weights.config;
    if let Some(&bad) = vocab.ids().iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::Data(format!("vocabulary id {bad} outside the model's {} tokens", cfg.vocab_size)));
    }
    let filtered = filtered_vocab(vocab, opts.exclude_frac)?;
    let schedule = LengthSchedule::new(opts.schedule, opts.num_sequences, cfg.max_seq_len)?;
    let sequences = schedule
        .base_lengths
        .iter()
        .enumerate()
        .map(|(i, &len)| scorer.sequence(&filtered, len, example_seed(opts.seed, i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let per_seq = sequences
        .par_iter()
        .map(|seq| scorer.score_sequence(weights, seq))
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![0.0; cfg.num_heads()];
    for scores in &per_seq {
        values.iter_mut().zip(scores).for_each(|(v, s)| *v += s);
    }
    let n = per_seq.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(InductionScoreMatrix {
        kind: scorer.kind(),
        layers: cfg.num_layers,
        heads: cfg.heads_per_layer,
        values,
        num_sequences: opts.num_sequences,
        schedule,
    })
}

/// Score heads on already-captured per-head traces; used to check that the
/// scorers depend only on the trace. `traces` holds `(attention, probs)`.
pub fn copying_scores_from_traces(traces: &PerHead<(Tensor, Tensor)>, tokens: &[u32]) -> Vec<f64> {
    traces.iter().map(|(_, (a, p))| copying_score(a, p, tokens)).collect()
}

/// Share of summed head scores kept after pruning by `ranking`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityCurve {
    pub kind: InductionKind,
    pub ranking_source: String,
    pub fractions: Vec<f64>,
    pub retained: Vec<f64>,
    /// Total capacity was zero; every point is reported as 0.
    pub degenerate: bool,
}

impl CapacityCurve {
    /// `fraction,retained`.
    pub fn to_csv(&self) -> Result<String> {
        csv_string(
            &["fraction", "retained"],
            self.fractions
                .iter()
                .zip(&self.retained)
                .map(|(f, r)| vec![f.to_string(), r.to_string()]),
        )
    }

    pub fn parse_csv(text: &str) -> Result<Vec<(f64, f64)>> {
        parse_csv(text, &["fraction", "retained"], "capacity csv")?
            .iter()
            .map(|row| Ok((parse_field(&row[0], "fraction")?, parse_field(&row[1], "retained")?)))
            .collect()
    }
}

pub fn capacity_curve(
    scores: &InductionScoreMatrix,
    ranking: &Ranking,
    fractions: &[f64],
    ranking_source: &str,
) -> Result<CapacityCurve> {
    if ranking.kind != ComponentKind::Head || ranking.layers != scores.layers || ranking.heads != scores.heads {
        return Err(Error::Usage("ranking does not match the score matrix".into()));
    }
    let total: f64 = scores.values.iter().sum();
    let degenerate = total == 0.0;
    let flat = ranking.flat();
    let mut retained = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("capacity fraction {f} outside [0, 1]")));
        }
        let removed = removal_count(flat.len(), f);
        let kept: f64 = flat[removed..].iter().map(|&i| scores.values[i]).sum();
        retained.push(match removed {
            _ if degenerate || removed == flat.len() => 0.0,
            0 => 1.0,
            _ => kept / total,
        });
    }
    if degenerate {
        log::warn!("{} capacity is zero; curve is degenerate", scores.kind.as_str());
    }
    Ok(CapacityCurve {
        kind: scores.kind,
        ranking_source: ranking_source.to_owned(),
        fractions: fractions.to_vec(),
        retained,
        degenerate,
    })
}
