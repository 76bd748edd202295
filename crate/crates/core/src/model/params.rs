use serde::Serialize;

use super::{ModelConfig, PruneMask};

/// Weight counts by component (biases of linear maps are not modelled).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParameterCount {
    pub token_embedding: u64,
    pub position_embedding: u64,
    /// `W_q`, `W_k`, `W_v` and the matching `d_h` rows of `W_o`, kept heads only.
    pub attention_heads: u64,
    pub attention_layer_norm: u64,
    /// `W₁` and `W₂`, kept FFNs only.
    pub ffn: u64,
    /// The FFN input norm, removed together with its FFN.
    pub ffn_layer_norm: u64,
    pub final_layer_norm: u64,
    pub output_projection: u64,
}

impl ParameterCount {
    pub fn total(&self) -> u64 {
        self.token_embedding
            + self.position_embedding
            + self.attention_heads
            + self.attention_layer_norm
            + self.ffn
            + self.ffn_layer_norm
            + self.final_layer_norm
            + self.output_projection
    }

    /// Attention plus FFN weights, the part pruning can touch.
    pub fn prunable(&self) -> u64 {
        self.attention_heads + self.ffn + self.ffn_layer_norm
    }
}

pub fn count_parameters(config: &ModelConfig, mask: &PruneMask) -> ParameterCount {
    let de = config.embed_dim as u64;
    let dh = config.head_dim as u64;
    let d = config.ffn_dim as u64;
    let v = config.vocab_size as u64;
    let heads = mask.heads_kept() as u64;
    let ffns = mask.ffns_kept() as u64;
    ParameterCount {
        token_embedding: v * de,
        position_embedding: config.max_seq_len as u64 * de,
        attention_heads: heads * 4 * de * dh,
        attention_layer_norm: config.num_layers as u64 * 2 * de,
        ffn: ffns * 2 * de * d,
        ffn_layer_norm: ffns * 2 * de,
        final_layer_norm: 2 * de,
        output_projection: de * v,
    }
}
