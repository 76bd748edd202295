//! A hand-wired model with known circuits, and tasks that exercise them.
//!
//! The residual stream is split into three blocks of one-hot coordinates:
//! the current token (`T`), the previous token (`B`) and the position
//! (`P`), plus two sign pairs: one constant and one that flips sign after
//! position 0. Heads that need a constant read a pair as a difference,
//! which the layer-norm mean subtraction cannot disturb. Three heads are
//! planted on top of low-amplitude random weights:
//!
//! * a previous-token head that copies the token at `t − 1` into `B`;
//! * an induction head that matches the current token against `B` and
//!   copies the token it lands on into `T`;
//! * a first-token head that attends to position 0 and copies that token
//!   into `T`.
//!
//! The output projection reads `T`, so the induction head answers
//! "what followed this token last time" and the first-token head answers
//! "what came first".

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{EvalDataset, EvalExample, Template, TrainPair};
use crate::model::{ModelConfig, ModelWeights};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

pub const BOS: u32 = 0;
pub const PREV_TOKEN_HEAD: (usize, usize) = (0, 0);
pub const INDUCTION_HEAD: (usize, usize) = (1, 0);
pub const FIRST_TOKEN_HEAD: (usize, usize) = (2, 0);

const NOISE_STD: f64 = 0.02;
const QK_PREV: f64 = 1.5;
const QK_INDUCTION: f64 = 2.0;
const QK_FIRST: f64 = 3.0;
const QK_FIRST_PENALTY: f64 = 0.155;
const WRITE_PREV: f64 = 0.11;
const WRITE_INDUCTION: f64 = 0.35;
const WRITE_FIRST: f64 = 0.35;
const READOUT: f64 = 1.5;

pub fn planted_config() -> ModelConfig {
    ModelConfig {
        num_layers: 4,
        heads_per_layer: 3,
        embed_dim: 192,
        head_dim: 64,
        ffn_dim: 32,
        vocab_size: 64,
        max_seq_len: 60,
    }
}

fn t_dim(i: usize) -> usize {
    i
}

fn b_dim(i: usize) -> usize {
    64 + i
}

fn p_dim(t: usize) -> usize {
    128 + t
}

const EVERY: (usize, usize) = (188, 189);
const FIRST: (usize, usize) = (190, 191);

fn build(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
    let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
    Tensor::matrix(rows, cols, data).expect("shape from arguments")
}

fn with_rows(t: &Tensor, start: usize, block: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut data = t.to_vec();
    for r in 0..block.rows() {
        data[(start + r) * cols..(start + r + 1) * cols].copy_from_slice(block.row(r));
    }
    Tensor::matrix(t.rows(), cols, data).expect("same shape")
}

/// The planted model; `seed` only affects the background noise.
pub fn planted_model(seed: u64) -> Result<ModelWeights> {
    let cfg = planted_config();
    let (de, dh, v, n) = (cfg.embed_dim, cfg.head_dim, cfg.vocab_size, cfg.max_seq_len);
    let mut w = ModelWeights::random(cfg, seed, NOISE_STD)?;
    w.tok_embed = build(v, de, |tok, j| f64::from(j == t_dim(tok)));
    w.pos_embed = build(n, de, |pos, j| match j {
        _ if j == p_dim(pos) || j == EVERY.0 || j == if pos == 0 { FIRST.0 } else { FIRST.1 } => 1.0,
        _ if j == EVERY.1 || j == if pos == 0 { FIRST.1 } else { FIRST.0 } => -1.0,
        _ => 0.0,
    });
    w.final_proj = build(de, v, |i, tok| if i == t_dim(tok) { READOUT } else { 0.0 });

    let copy_value = build(de, dh, |i, j| f64::from(i == t_dim(j)));
    let write = |target: fn(usize) -> usize, gain: f64| build(dh, de, move |i, j| if j == target(i) { gain } else { 0.0 });

    let (l, h) = PREV_TOKEN_HEAD;
    let head = &mut w.layers[l].heads[h];
    head.wq = build(de, dh, |i, j| if i > p_dim(0) && i < p_dim(n) && j == i - p_dim(0) - 1 { QK_PREV } else { 0.0 });
    head.wk = build(de, dh, |i, j| if i >= p_dim(0) && i < p_dim(n) && j == i - p_dim(0) { QK_PREV } else { 0.0 });
    head.wv = copy_value.clone();
    w.layers[l].wo = with_rows(&w.layers[l].wo, h * dh, &write(b_dim, WRITE_PREV));

    let (l, h) = INDUCTION_HEAD;
    let head = &mut w.layers[l].heads[h];
    // Column 0 would match BOS, which never needs matching; it carries a
    // penalty on position 0 instead.
    head.wq = build(de, dh, |i, j| match j {
        0 if i == EVERY.0 => QK_FIRST_PENALTY,
        0 if i == EVERY.1 => -QK_FIRST_PENALTY,
        _ if j > 0 && i == t_dim(j) => QK_INDUCTION,
        _ => 0.0,
    });
    head.wk = build(de, dh, |i, j| match j {
        0 if i == FIRST.0 => -QK_FIRST_PENALTY,
        0 if i == FIRST.1 => QK_FIRST_PENALTY,
        _ if j > 0 && i == b_dim(j) => QK_INDUCTION,
        _ => 0.0,
    });
    head.wv = copy_value.clone();
    w.layers[l].wo = with_rows(&w.layers[l].wo, h * dh, &write(t_dim, WRITE_INDUCTION));

    let (l, h) = FIRST_TOKEN_HEAD;
    let head = &mut w.layers[l].heads[h];
    let pair = |(plus, minus): (usize, usize)| {
        build(de, dh, move |i, j| match (i, j) {
            (i, 0) if i == plus => QK_FIRST,
            (i, 0) if i == minus => -QK_FIRST,
            _ => 0.0,
        })
    };
    head.wq = pair(EVERY);
    head.wk = pair(FIRST);
    head.wv = copy_value;
    w.layers[l].wo = with_rows(&w.layers[l].wo, h * dh, &write(t_dim, WRITE_FIRST));

    w.validate()?;
    Ok(w)
}

/// `<s>` followed by `w01` … `w63`.
pub fn planted_vocab() -> Vocab {
    let mut tokens = vec!["<s>".to_string()];
    tokens.extend((1..planted_config().vocab_size).map(|i| format!("w{i:02}")));
    Vocab::new(tokens).expect("distinct tokens")
}

fn words(vocab: &Vocab, ids: &[u32]) -> String {
    ids.iter()
        .map(|&i| vocab.token(i).expect("id from vocab"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// `(query ids, gold id, distractor ids)` of one generated item.
type Item = (Vec<u32>, u32, Vec<u32>);

fn dataset(name: &str, train: usize, eval: usize, seed: u64, make: impl Fn(&mut ChaCha8Rng) -> Item) -> EvalDataset {
    let vocab = planted_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..train)
        .map(|_| {
            let (q, gold, _) = make(&mut rng);
            TrainPair {
                input: words(&vocab, &q),
                output: words(&vocab, &[gold]),
            }
        })
        .collect();
    let eval = (0..eval)
        .map(|_| {
            let (q, gold, distractors) = make(&mut rng);
            let mut options: Vec<u32> = distractors;
            options.push(gold);
            options.shuffle(&mut rng);
            EvalExample {
                query: words(&vocab, &q),
                options: options.iter().map(|&o| words(&vocab, &[o])).collect(),
                gold: options.iter().position(|&o| o == gold).expect("gold is an option"),
            }
        })
        .collect();
    EvalDataset::new(name, train, eval, Template::default()).expect("generated dataset is valid")
}

fn content_tokens(rng: &mut ChaCha8Rng, n: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = (1..planted_config().vocab_size as u32).collect();
    let (chosen, _) = ids.partial_shuffle(rng, n);
    chosen.to_vec()
}

/// Answer with the first token of the query. Distractors are other query
/// tokens, never the last one.
pub fn first_token_task(train: usize, eval: usize, seed: u64) -> EvalDataset {
    dataset("first", train, eval, seed, |rng| {
        let q = content_tokens(rng, 8);
        let mut pool = q[1..q.len() - 1].to_vec();
        pool.shuffle(rng);
        (q.clone(), q[0], pool[..3].to_vec())
    })
}

/// `<s> s₁ … s₈ sᵢ`: answer with the token that followed `sᵢ`.
/// Distractors are other listed tokens, never `sᵢ` itself.
pub fn recall_task(train: usize, eval: usize, seed: u64) -> EvalDataset {
    dataset("recall", train, eval, seed, |rng| {
        let s = content_tokens(rng, 8);
        let i = rng.gen_range(0..s.len() - 1);
        let gold = s[i + 1];
        let mut pool: Vec<u32> = s.iter().copied().filter(|&t| t != s[i] && t != gold).collect();
        pool.shuffle(rng);
        let mut q = vec![BOS];
        q.extend_from_slice(&s);
        q.push(s[i]);
        (q, gold, pool[..3].to_vec())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{prepare_dataset, ShotSetting};

    #[test]
    fn tasks_tokenize_and_fit() {
        let vocab = planted_vocab();
        for ds in [first_token_task(4, 10, 1), recall_task(4, 10, 1)] {
            let p = prepare_dataset(&ds, &vocab, ShotSetting::new(1, 0), planted_config().max_seq_len).unwrap();
            assert_eq!(p.examples.len(), 10);
            assert!(p.skipped.is_empty());
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(recall_task(3, 5, 9), recall_task(3, 5, 9));
        assert_ne!(recall_task(3, 5, 9), recall_task(3, 5, 10));
    }
}
