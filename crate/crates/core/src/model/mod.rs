//! Pre-norm decoder-only transformer with per-head and per-FFN removal.
//!
//! Layer `ℓ` computes
//!
//! ```text
//! t = z + MHA(LN1(z))            MHA(M) = [A¹(M); …; Aᴴ(M)] · W_o
//! z' = t + FFN(t)                FFN(M) = ReLU(LN2(M) · W₁) · W₂
//! ```
//!
//! with `Aʰ(M) = softmax_causal(M·W_qʰ·(M·W_kʰ)ᵀ / √d_h) · M · W_vʰ`. A removed
//! head contributes a zero block to the concatenation; a removed FFN
//! contributes zero to the residual.

mod checkpoint;
mod params;

pub use checkpoint::{
    checkpoint_digest, decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC,
};
pub use params::{count_parameters, ParameterCount};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub heads_per_layer: usize,
    pub embed_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Desk-scale default: runs the full pipeline in seconds.
    pub fn toy() -> Self {
        Self {
            num_layers: 4,
            heads_per_layer: 8,
            embed_dim: 128,
            head_dim: 16,
            ffn_dim: 512,
            vocab_size: 512,
            max_seq_len: 256,
        }
    }

    /// OPT-66B shape. Only ever used for parameter accounting.
    pub fn opt_66b() -> Self {
        Self {
            num_layers: 64,
            heads_per_layer: 72,
            embed_dim: 9216,
            head_dim: 128,
            ffn_dim: 36864,
            vocab_size: 50272,
            max_seq_len: 2048,
        }
    }

    pub fn num_heads(&self) -> usize {
        self.num_layers * self.heads_per_layer
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim * self.heads_per_layer != self.embed_dim {
            return Err(Error::Config(format!(
                "head_dim ({}) x heads_per_layer ({}) must equal embed_dim ({})",
                self.head_dim, self.heads_per_layer, self.embed_dim
            )));
        }
        if self.max_seq_len < 1 {
            return Err(Error::Config("max_seq_len must be at least 1".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if self.num_layers == 0 || self.heads_per_layer == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("layer, head and ffn counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub wo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Tensor,
    pub final_ln_bias: Tensor,
    pub final_proj: Tensor,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let normal = Normal::new(0.0f32, std as f32).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng) as f64).collect();
    Tensor::matrix(rows, cols, data).expect("shape from arguments")
}

impl ModelWeights {
    /// Gaussian-initialized weights with unit layer-norm gains.
    pub fn random(config: ModelConfig, seed: u64, std: f64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (de, dh, d, v) = (config.embed_dim, config.head_dim, config.ffn_dim, config.vocab_size);
        let ones = Tensor::filled(vec![de], 1.0);
        let zeros = Tensor::zeros(vec![de]);
        let tok_embed = random_matrix(&mut rng, v, de, std);
        let pos_embed = random_matrix(&mut rng, config.max_seq_len, de, std);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                heads: (0..config.heads_per_layer)
                    .map(|_| HeadWeights {
                        wq: random_matrix(&mut rng, de, dh, std),
                        wk: random_matrix(&mut rng, de, dh, std),
                        wv: random_matrix(&mut rng, de, dh, std),
                    })
                    .collect(),
                wo: random_matrix(&mut rng, de, de, std),
                ln1_gain: ones.clone(),
                ln1_bias: zeros.clone(),
                w1: random_matrix(&mut rng, de, d, std),
                w2: random_matrix(&mut rng, d, de, std),
                ln2_gain: ones.clone(),
                ln2_bias: zeros.clone(),
            })
            .collect();
        let final_proj = random_matrix(&mut rng, de, v, std);
        Ok(Self {
            config,
            tok_embed,
            pos_embed,
            layers,
            final_ln_gain: ones,
            final_ln_bias: zeros,
            final_proj,
        })
    }

    /// Round every value to the nearest `f32`, the checkpoint precision.
    pub fn rounded_to_f32(&self) -> Self {
        let r = |t: &Tensor| t.map(|v| v as f32 as f64);
        Self {
            config: self.config,
            tok_embed: r(&self.tok_embed),
            pos_embed: r(&self.pos_embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadWeights {
                            wq: r(&h.wq),
                            wk: r(&h.wk),
                            wv: r(&h.wv),
                        })
                        .collect(),
                    wo: r(&l.wo),
                    ln1_gain: r(&l.ln1_gain),
                    ln1_bias: r(&l.ln1_bias),
                    w1: r(&l.w1),
                    w2: r(&l.w2),
                    ln2_gain: r(&l.ln2_gain),
                    ln2_bias: r(&l.ln2_bias),
                })
                .collect(),
            final_ln_gain: r(&self.final_ln_gain),
            final_ln_bias: r(&self.final_ln_bias),
            final_proj: r(&self.final_proj),
        }
    }

    /// Tensors in canonical checkpoint order, paired with their names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.tok".into(), &self.tok_embed),
            ("embed.pos".into(), &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer.{l}.head.{h}.wq"), &head.wq));
                out.push((format!("layer.{l}.head.{h}.wk"), &head.wk));
                out.push((format!("layer.{l}.head.{h}.wv"), &head.wv));
            }
            out.push((format!("layer.{l}.wo"), &layer.wo));
            out.push((format!("layer.{l}.ln1.gain"), &layer.ln1_gain));
            out.push((format!("layer.{l}.ln1.bias"), &layer.ln1_bias));
            out.push((format!("layer.{l}.ffn.w1"), &layer.w1));
            out.push((format!("layer.{l}.ffn.w2"), &layer.w2));
            out.push((format!("layer.{l}.ln2.gain"), &layer.ln2_gain));
            out.push((format!("layer.{l}.ln2.bias"), &layer.ln2_bias));
        }
        out.push(("final.ln.gain".into(), &self.final_ln_gain));
        out.push(("final.ln.bias".into(), &self.final_ln_bias));
        out.push(("final.proj".into(), &self.final_proj));
        out
    }

    /// Shape every named tensor must have under `config`.
    pub fn expected_shape(config: &ModelConfig, name: &str) -> Option<Vec<usize>> {
        let (de, dh, d, v) = (config.embed_dim, config.head_dim, config.ffn_dim, config.vocab_size);
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["embed", "tok"] => Some(vec![v, de]),
            ["embed", "pos"] => Some(vec![config.max_seq_len, de]),
            ["final", "ln", "gain" | "bias"] => Some(vec![de]),
            ["final", "proj"] => Some(vec![de, v]),
            ["layer", l, rest @ ..] => {
                let l: usize = l.parse().ok()?;
                if l >= config.num_layers {
                    return None;
                }
                match rest {
                    ["head", h, "wq" | "wk" | "wv"] => {
                        let h: usize = h.parse().ok()?;
                        (h < config.heads_per_layer).then(|| vec![de, dh])
                    }
                    ["wo"] => Some(vec![de, de]),
                    ["ln1" | "ln2", "gain" | "bias"] => Some(vec![de]),
                    ["ffn", "w1"] => Some(vec![de, d]),
                    ["ffn", "w2"] => Some(vec![d, de]),
                    _ => None,
                }
            }
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.num_layers {
            return Err(Error::Data(format!(
                "{} layers present, config says {}",
                self.layers.len(),
                self.config.num_layers
            )));
        }
        for layer in &self.layers {
            if layer.heads.len() != self.config.heads_per_layer {
                return Err(Error::Data("head count does not match config".into()));
            }
        }
        for (name, t) in self.named_tensors() {
            let want = Self::expected_shape(&self.config, &name)
                .ok_or_else(|| Error::Data(format!("unexpected tensor {name}")))?;
            if t.shape() != want.as_slice() {
                return Err(Error::Data(format!(
                    "tensor {name} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Data(format!("tensor {name} contains non-finite values")));
            }
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Token plus learned absolute position embeddings, `[N × d_e]`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = self.tok_embed.gather_rows(&ids)?;
        let pos = self.pos_embed.slice_rows(0, tokens.len())?;
        Ok(tok.add(&pos)?)
    }

    /// Rows of `W_o` that read head `head`'s output, `[d_h × d_e]`.
    pub fn wo_slice(&self, layer: usize, head: usize) -> Result<Tensor> {
        let dh = self.config.head_dim;
        Ok(self.layers[layer].wo.slice_rows(head * dh, (head + 1) * dh)?)
    }
}

/// Boolean keep-mask over heads (`num_layers × H`) and FFNs (`num_layers`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    pub num_layers: usize,
    pub heads_per_layer: usize,
    head_mask: Vec<bool>,
    ffn_mask: Vec<bool>,
}

impl PruneMask {
    pub fn full(config: &ModelConfig) -> Self {
        Self {
            num_layers: config.num_layers,
            heads_per_layer: config.heads_per_layer,
            head_mask: vec![true; config.num_heads()],
            ffn_mask: vec![true; config.num_layers],
        }
    }

    pub fn empty(config: &ModelConfig) -> Self {
        Self {
            num_layers: config.num_layers,
            heads_per_layer: config.heads_per_layer,
            head_mask: vec![false; config.num_heads()],
            ffn_mask: vec![false; config.num_layers],
        }
    }

    pub fn matches(&self, config: &ModelConfig) -> bool {
        self.num_layers == config.num_layers && self.heads_per_layer == config.heads_per_layer
    }

    pub fn head_kept(&self, layer: usize, head: usize) -> bool {
        self.head_mask[layer * self.heads_per_layer + head]
    }

    pub fn ffn_kept(&self, layer: usize) -> bool {
        self.ffn_mask[layer]
    }

    pub fn set_head(&mut self, layer: usize, head: usize, keep: bool) {
        self.head_mask[layer * self.heads_per_layer + head] = keep;
    }

    pub fn set_ffn(&mut self, layer: usize, keep: bool) {
        self.ffn_mask[layer] = keep;
    }

    pub fn head_mask(&self) -> &[bool] {
        &self.head_mask
    }

    pub fn ffn_mask(&self) -> &[bool] {
        &self.ffn_mask
    }

    pub fn heads_kept(&self) -> usize {
        self.head_mask.iter().filter(|&&k| k).count()
    }

    pub fn ffns_kept(&self) -> usize {
        self.ffn_mask.iter().filter(|&&k| k).count()
    }

    pub fn fraction_heads_kept(&self) -> f64 {
        self.heads_kept() as f64 / self.head_mask.len() as f64
    }

    /// `1`/`0` per head in row-major order, a `|`, then one bit per FFN.
    pub fn bit_string(&self) -> String {
        let bit = |k: &bool| if *k { '1' } else { '0' };
        let mut s: String = self.head_mask.iter().map(bit).collect();
        s.push('|');
        s.extend(self.ffn_mask.iter().map(bit));
        s
    }

    /// Hex SHA-256 of [`bit_string`](Self::bit_string).
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.bit_string().as_bytes()))
    }
}

/// Row-major `num_layers × H` table.
#[derive(Debug, Clone, PartialEq)]
pub struct PerHead<T> {
    pub heads_per_layer: usize,
    items: Vec<T>,
}

impl<T> PerHead<T> {
    pub fn from_fn(layers: usize, heads: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut items = Vec::with_capacity(layers * heads);
        for l in 0..layers {
            for h in 0..heads {
                items.push(f(l, h));
            }
        }
        Self {
            heads_per_layer: heads,
            items,
        }
    }

    pub fn get(&self, layer: usize, head: usize) -> &T {
        &self.items[layer * self.heads_per_layer + head]
    }

    pub fn get_mut(&mut self, layer: usize, head: usize) -> &mut T {
        &mut self.items[layer * self.heads_per_layer + head]
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), &T)> {
        let h = self.heads_per_layer;
        self.items.iter().enumerate().map(move |(i, t)| ((i / h, i % h), t))
    }
}

/// Edit applied to a head's output `Aʰ` before it enters the concatenation.
#[derive(Debug, Clone)]
pub enum HeadEdit {
    Scale(f64),
    Add(Tensor),
}

#[derive(Debug, Clone)]
pub struct HeadIntervention {
    pub layer: usize,
    pub head: usize,
    pub edit: HeadEdit,
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub capture_attention: bool,
    pub capture_head_outputs: bool,
    /// Mark every kept head output as a tracked tape value.
    pub track_head_outputs: bool,
    pub interventions: Vec<HeadIntervention>,
}

impl ForwardOptions {
    pub fn with_attention() -> Self {
        Self {
            capture_attention: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Tensor,
    pub attention: Option<PerHead<Option<Tensor>>>,
    pub head_outputs: Option<PerHead<Tensor>>,
}

/// Forward pass recorded on a tape; values are read back through the tape.
#[derive(Debug)]
pub struct TapeForward {
    pub logits: Var,
    pub head_outputs: PerHead<Var>,
    pub attention: PerHead<Option<Var>>,
}

/// Run the model on `tokens`, applying `mask` if given.
pub fn forward(
    weights: &ModelWeights,
    mask: Option<&PruneMask>,
    tokens: &[u32],
    opts: &ForwardOptions,
) -> Result<ForwardTrace> {
    let mut tape = GradTape::new();
    let out = forward_on_tape(&mut tape, weights, mask, tokens, opts)?;
    let logits = tape.value(out.logits).clone();
    let attention = opts.capture_attention.then(|| {
        let l = weights.config.num_layers;
        let h = weights.config.heads_per_layer;
        PerHead::from_fn(l, h, |li, hi| out.attention.get(li, hi).map(|v| tape.value(v).clone()))
    });
    let head_outputs = opts.capture_head_outputs.then(|| {
        let l = weights.config.num_layers;
        let h = weights.config.heads_per_layer;
        PerHead::from_fn(l, h, |li, hi| tape.value(*out.head_outputs.get(li, hi)).clone())
    });
    Ok(ForwardTrace {
        logits,
        attention,
        head_outputs,
    })
}

/// Forward pass that leaves every intermediate on `tape`.
pub fn forward_on_tape(
    tape: &mut GradTape,
    weights: &ModelWeights,
    mask: Option<&PruneMask>,
    tokens: &[u32],
    opts: &ForwardOptions,
) -> Result<TapeForward> {
    let cfg = &weights.config;
    if let Some(m) = mask {
        if !m.matches(cfg) {
            return Err(Error::Usage("prune mask does not match model config".into()));
        }
    }
    for iv in &opts.interventions {
        if iv.layer >= cfg.num_layers || iv.head >= cfg.heads_per_layer {
            return Err(Error::Usage(format!(
                "intervention targets head ({}, {}) outside the model",
                iv.layer, iv.head
            )));
        }
    }
    let n = tokens.len();
    let x = weights.embed(tokens)?;
    let mut z = tape.constant(x);
    let inv_sqrt_dh = 1.0 / (cfg.head_dim as f64).sqrt();

    let mut head_outputs = Vec::with_capacity(cfg.num_heads());
    let mut attention = Vec::with_capacity(cfg.num_heads());

    for (l, layer) in weights.layers.iter().enumerate() {
        let g1 = tape.constant(layer.ln1_gain.clone());
        let b1 = tape.constant(layer.ln1_bias.clone());
        let m = tape.layer_norm(z, g1, b1)?;
        let mut parts = Vec::with_capacity(cfg.heads_per_layer);
        for (h, head) in layer.heads.iter().enumerate() {
            if mask.is_some_and(|mk| !mk.head_kept(l, h)) {
                let zero = tape.constant(Tensor::zeros(vec![n, cfg.head_dim]));
                parts.push(zero);
                head_outputs.push(zero);
                attention.push(None);
                continue;
            }
            let wq = tape.constant(head.wq.clone());
            let wk = tape.constant(head.wk.clone());
            let wv = tape.constant(head.wv.clone());
            let q = tape.matmul(m, wq)?;
            let k = tape.matmul(m, wk)?;
            let v = tape.matmul(m, wv)?;
            let raw = tape.matmul_nt(q, k)?;
            let scores = tape.scale(raw, inv_sqrt_dh)?;
            let s = tape.causal_softmax(scores)?;
            let mut a = tape.matmul(s, v)?;
            for iv in opts.interventions.iter().filter(|iv| iv.layer == l && iv.head == h) {
                a = match &iv.edit {
                    HeadEdit::Scale(c) => tape.scale(a, *c)?,
                    HeadEdit::Add(delta) => {
                        let d = tape.constant(delta.clone());
                        tape.add(a, d)?
                    }
                };
            }
            if opts.track_head_outputs {
                tape.track(a)?;
            }
            parts.push(a);
            head_outputs.push(a);
            attention.push(Some(s));
        }
        let cat = tape.concat_cols(&parts)?;
        let wo = tape.constant(layer.wo.clone());
        let mha = tape.matmul(cat, wo)?;
        let t = tape.add(z, mha)?;

        z = if mask.is_none_or(|mk| mk.ffn_kept(l)) {
            let g2 = tape.constant(layer.ln2_gain.clone());
            let b2 = tape.constant(layer.ln2_bias.clone());
            let w1 = tape.constant(layer.w1.clone());
            let w2 = tape.constant(layer.w2.clone());
            let normed = tape.layer_norm(t, g2, b2)?;
            let hidden = tape.matmul(normed, w1)?;
            let act = tape.relu(hidden)?;
            let ffn = tape.matmul(act, w2)?;
            tape.add(t, ffn)?
        } else {
            t
        };
    }

    let gf = tape.constant(weights.final_ln_gain.clone());
    let bf = tape.constant(weights.final_ln_bias.clone());
    let proj = tape.constant(weights.final_proj.clone());
    let normed = tape.layer_norm(z, gf, bf)?;
    let logits = tape.matmul(normed, proj)?;

    let hpl = cfg.heads_per_layer;
    Ok(TapeForward {
        logits,
        head_outputs: PerHead {
            heads_per_layer: hpl,
            items: head_outputs,
        },
        attention: PerHead {
            heads_per_layer: hpl,
            items: attention,
        },
    })
}

/// A single head run in isolation on the embedded sequence.
#[derive(Debug, Clone)]
pub struct HeadContribution {
    /// Causal attention pattern of the head, `[N × N]`.
    pub attention: Tensor,
    /// Row-softmaxed vocabulary logits of the head's output, `[N × V]`.
    pub probs: Tensor,
}

/// Feed the embedded `tokens` straight through head `(layer, head)`: the
/// layer's input norm, the head's attention, its slice of `W_o`, and the
/// vocabulary projection. Independent of any prune mask.
pub fn head_contribution_logits(
    weights: &ModelWeights,
    layer: usize,
    head: usize,
    tokens: &[u32],
) -> Result<HeadContribution> {
    let cfg = &weights.config;
    if layer >= cfg.num_layers || head >= cfg.heads_per_layer {
        return Err(Error::Usage(format!(
            "head ({layer}, {head}) outside a {}x{} model",
            cfg.num_layers, cfg.heads_per_layer
        )));
    }
    let x = weights.embed(tokens)?;
    let lw = &weights.layers[layer];
    let m = tensor::layer_norm(&x, &lw.ln1_gain, &lw.ln1_bias)?;
    head_contribution_from_normed(weights, layer, head, &m)
}

pub(crate) fn head_contribution_from_normed(
    weights: &ModelWeights,
    layer: usize,
    head: usize,
    normed: &Tensor,
) -> Result<HeadContribution> {
    let hw = &weights.layers[layer].heads[head];
    let q = tensor::matmul(normed, &hw.wq)?;
    let k = tensor::matmul(normed, &hw.wk)?;
    let v = tensor::matmul(normed, &hw.wv)?;
    let scores = tensor::matmul_nt(&q, &k)?.scale(1.0 / (weights.config.head_dim as f64).sqrt());
    let attention = tensor::causal_softmax(&scores)?;
    let out = tensor::matmul(&attention, &v)?;
    let hidden = tensor::matmul(&out, &weights.wo_slice(layer, head)?)?;
    let logits = tensor::matmul(&hidden, &weights.final_proj)?;
    let probs = tensor::softmax_rows(&logits)?;
    Ok(HeadContribution { attention, probs })
}
