#![allow(dead_code)]

pub mod cli;

use attn_scalpel::eval::PreparedExample;
use attn_scalpel::model::{ModelConfig, ModelWeights, PruneMask};
use attn_scalpel::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(layers: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        heads_per_layer: heads,
        embed_dim: 3 * heads,
        head_dim: 3,
        ffn_dim: 10,
        vocab_size: 13,
        max_seq_len: 16,
    }
}

/// Random weights with non-trivial layer-norm parameters.
pub fn random_model(cfg: ModelConfig, seed: u64) -> ModelWeights {
    let mut w = ModelWeights::random(cfg, seed, 0.6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut jitter = |t: &Tensor, base: f64| {
        let data = t.data().iter().map(|_| base + rng.gen_range(-0.3..0.3)).collect();
        Tensor::new(t.shape().to_vec(), data).unwrap()
    };
    for l in &mut w.layers {
        l.ln1_gain = jitter(&l.ln1_gain, 1.0);
        l.ln1_bias = jitter(&l.ln1_bias, 0.0);
        l.ln2_gain = jitter(&l.ln2_gain, 1.0);
        l.ln2_bias = jitter(&l.ln2_bias, 0.0);
    }
    w.final_ln_gain = jitter(&w.final_ln_gain, 1.0);
    w.final_ln_bias = jitter(&w.final_ln_bias, 0.0);
    w
}

pub fn random_tokens(rng: &mut ChaCha8Rng, vocab: usize, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

pub fn random_examples(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<PreparedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|index| {
            let plen = rng.gen_range(2..6);
            let options: Vec<Vec<u32>> = (0..3)
                .map(|_| {
                    let len = rng.gen_range(1..3);
                    random_tokens(&mut rng, cfg.vocab_size, len)
                })
                .collect();
            PreparedExample {
                index,
                prompt: random_tokens(&mut rng, cfg.vocab_size, plen),
                options,
                gold: rng.gen_range(0..3),
            }
        })
        .collect()
}

pub fn random_mask(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> PruneMask {
    let mut m = PruneMask::full(cfg);
    for l in 0..cfg.num_layers {
        for h in 0..cfg.heads_per_layer {
            m.set_head(l, h, rng.gen_bool(0.6));
        }
        m.set_ffn(l, rng.gen_bool(0.6));
    }
    m
}

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn vecf(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn ln(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let s = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(i, v)| (v - mu) / s * g[i] + b[i]).collect()
        })
        .collect()
}

struct RefHead {
    wq: Mat,
    wk: Mat,
    wv: Mat,
    /// This head's rows of the output projection.
    wo: Mat,
}

struct RefLayer {
    heads: Vec<RefHead>,
    ln1: (Vec<f64>, Vec<f64>),
    ffn: Option<(Vec<f64>, Vec<f64>, Mat, Mat)>,
}

/// A model with pruned components physically removed, evaluated with
/// plain loops.
pub struct ShrunkModel {
    tok: Mat,
    pos: Mat,
    layers: Vec<RefLayer>,
    final_ln: (Vec<f64>, Vec<f64>),
    proj: Mat,
    embed_dim: usize,
    head_dim: usize,
}

impl ShrunkModel {
    pub fn new(w: &ModelWeights, mask: &PruneMask) -> Self {
        let dh = w.config.head_dim;
        let layers = w
            .layers
            .iter()
            .enumerate()
            .map(|(l, lw)| {
                let wo = mat(&lw.wo);
                let heads = (0..w.config.heads_per_layer)
                    .filter(|&h| mask.head_kept(l, h))
                    .map(|h| RefHead {
                        wq: mat(&lw.heads[h].wq),
                        wk: mat(&lw.heads[h].wk),
                        wv: mat(&lw.heads[h].wv),
                        wo: wo[h * dh..(h + 1) * dh].to_vec(),
                    })
                    .collect();
                let ffn = mask
                    .ffn_kept(l)
                    .then(|| (vecf(&lw.ln2_gain), vecf(&lw.ln2_bias), mat(&lw.w1), mat(&lw.w2)));
                RefLayer {
                    heads,
                    ln1: (vecf(&lw.ln1_gain), vecf(&lw.ln1_bias)),
                    ffn,
                }
            })
            .collect();
        Self {
            tok: mat(&w.tok_embed),
            pos: mat(&w.pos_embed),
            layers,
            final_ln: (vecf(&w.final_ln_gain), vecf(&w.final_ln_bias)),
            proj: mat(&w.final_proj),
            embed_dim: w.config.embed_dim,
            head_dim: dh,
        }
    }

    pub fn logits(&self, tokens: &[u32]) -> Mat {
        let n = tokens.len();
        let mut x: Mat = tokens
            .iter()
            .enumerate()
            .map(|(t, &tok)| (0..self.embed_dim).map(|j| self.tok[tok as usize][j] + self.pos[t][j]).collect())
            .collect();
        for layer in &self.layers {
            let m = ln(&x, &layer.ln1.0, &layer.ln1.1);
            for head in &layer.heads {
                let (q, k, v) = (mm(&m, &head.wq), mm(&m, &head.wk), mm(&m, &head.wv));
                let mut out = vec![vec![0.0; self.head_dim]; n];
                for t in 0..n {
                    let s: Vec<f64> = (0..=t)
                        .map(|u| q[t].iter().zip(&k[u]).map(|(a, b)| a * b).sum::<f64>() / (self.head_dim as f64).sqrt())
                        .collect();
                    let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for u in 0..=t {
                        for d in 0..self.head_dim {
                            out[t][d] += e[u] / z * v[u][d];
                        }
                    }
                }
                let add = mm(&out, &head.wo);
                for t in 0..n {
                    for j in 0..self.embed_dim {
                        x[t][j] += add[t][j];
                    }
                }
            }
            if let Some((g, b, w1, w2)) = &layer.ffn {
                let h = mm(&ln(&x, g, b), w1);
                let h: Mat = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
                let f = mm(&h, w2);
                for t in 0..n {
                    for j in 0..self.embed_dim {
                        x[t][j] += f[t][j];
                    }
                }
            }
        }
        mm(&ln(&x, &self.final_ln.0, &self.final_ln.1), &self.proj)
    }
}

/// `−(1/T) Σ log p(y_j | ·)` over the option positions, from raw logits.
pub fn gold_nll(logits: &[Vec<f64>], seq: &[u32], prompt_len: usize) -> f64 {
    let mut total = 0.0;
    for t in prompt_len..seq.len() {
        let row = &logits[t - 1];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        total += lse - row[seq[t] as usize];
    }
    total / (seq.len() - prompt_len) as f64
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    mat(t)
}

pub fn dataset(name: &str, examples: Vec<PreparedExample>) -> attn_scalpel::eval::PreparedDataset {
    attn_scalpel::eval::PreparedDataset {
        name: name.into(),
        shots: attn_scalpel::eval::ShotSetting::new(0, 0),
        examples,
        skipped: Vec::new(),
    }
}

/// Tape gradient of the gold loss with respect to every head output, next
/// to central differences at `per_head` random coordinates. Returns the
/// worst relative error.
pub fn finite_difference_error(w: &ModelWeights, ex: &PreparedExample, per_head: usize, step: f64, seed: u64) -> f64 {
    use attn_scalpel::model::{forward, forward_on_tape, ForwardOptions, HeadEdit, HeadIntervention};
    use attn_scalpel::tape::GradTape;

    let seq = ex.gold_sequence();
    let p = ex.prompt.len();
    let targets: Vec<(usize, usize)> = (p..seq.len()).map(|t| (t - 1, seq[t] as usize)).collect();
    let mut tape = GradTape::new();
    let opts = ForwardOptions {
        track_head_outputs: true,
        ..ForwardOptions::default()
    };
    let out = forward_on_tape(&mut tape, w, None, &seq, &opts).unwrap();
    let loss = tape.mean_nll(out.logits, &targets).unwrap();
    let grads = tape.backward(loss).unwrap();

    let cfg = &w.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for l in 0..cfg.num_layers {
        for h in 0..cfg.heads_per_layer {
            let g = grads.get(*out.head_outputs.get(l, h)).expect("tracked head");
            for _ in 0..per_head {
                // the last position feeds no target, so sample before it
                let (i, j) = (rng.gen_range(0..seq.len() - 1), rng.gen_range(0..cfg.head_dim));
                let nudged = |delta: f64| {
                    let mut d = Tensor::zeros(vec![seq.len(), cfg.head_dim]);
                    let mut data = d.to_vec();
                    data[i * cfg.head_dim + j] = delta;
                    d = Tensor::new(vec![seq.len(), cfg.head_dim], data).unwrap();
                    let opts = ForwardOptions {
                        interventions: vec![HeadIntervention { layer: l, head: h, edit: HeadEdit::Add(d) }],
                        ..ForwardOptions::default()
                    };
                    gold_nll(&rows(&forward(w, None, &seq, &opts).unwrap().logits), &seq, p)
                };
                let fd = (nudged(step) - nudged(-step)) / (2.0 * step);
                let tape_g = g.get2(i, j);
                let scale = tape_g.abs().max(fd.abs());
                if scale > 1e-9 {
                    worst = worst.max((tape_g - fd).abs() / scale);
                }
            }
        }
    }
    worst
}
