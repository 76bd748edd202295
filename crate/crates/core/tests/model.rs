mod common;

use attn_scalpel::model::{
    count_parameters, decode_checkpoint, encode_checkpoint, forward, ForwardOptions, ModelConfig, PruneMask,
};
use common::{random_mask, random_model, random_tokens, rows, tiny_config, ShrunkModel};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn unmasked_forward_matches_reference() {
    let w = random_model(tiny_config(2, 3), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tokens = random_tokens(&mut rng, 13, 9);
    let ours = forward(&w, None, &tokens, &ForwardOptions::default()).unwrap();
    let reference = ShrunkModel::new(&w, &PruneMask::full(&w.config)).logits(&tokens);
    assert!(max_abs_diff(&rows(&ours.logits), &reference) < 1e-9);
}

#[test]
fn fully_masked_model_is_embeddings_through_final_norm() {
    let w = random_model(tiny_config(3, 2), 4);
    let tokens = [1, 5, 2, 7];
    let mask = PruneMask::empty(&w.config);
    let ours = forward(&w, Some(&mask), &tokens, &ForwardOptions::default()).unwrap();
    let reference = ShrunkModel::new(&w, &mask).logits(&tokens);
    assert!(max_abs_diff(&rows(&ours.logits), &reference) < 1e-9);
}

#[test]
fn opt_66b_component_counts() {
    let cfg = ModelConfig::opt_66b();
    let full = count_parameters(&cfg, &PruneMask::full(&cfg));
    // 64 layers · 72 heads · 4 · 9216 · 128 and 64 · 2 · 9216 · 36864
    assert_eq!(full.attention_heads, 64 * 72 * 4 * 9216 * 128);
    assert_eq!(full.ffn, 64 * 2 * 9216 * 36864);
    let none = count_parameters(&cfg, &PruneMask::empty(&cfg));
    assert_eq!(none.attention_heads, 0);
    assert_eq!(none.ffn, 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masked_forward_equals_shrunken_model(seed in 0u64..1000, layers in 1usize..4, heads in 1usize..4, len in 1usize..10) {
        let w = random_model(tiny_config(layers, heads), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 17);
        let mask = random_mask(&w.config, &mut rng);
        let tokens = random_tokens(&mut rng, w.config.vocab_size, len);
        let ours = forward(&w, Some(&mask), &tokens, &ForwardOptions::default()).unwrap();
        let reference = ShrunkModel::new(&w, &mask).logits(&tokens);
        prop_assert!(max_abs_diff(&rows(&ours.logits), &reference) < 1e-6);
    }

    #[test]
    fn later_tokens_never_change_earlier_logits(seed in 0u64..1000, len in 2usize..10) {
        let w = random_model(tiny_config(2, 2), seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = random_tokens(&mut rng, w.config.vocab_size, len);
        let full = forward(&w, None, &tokens, &ForwardOptions::default()).unwrap();
        let prefix = forward(&w, None, &tokens[..len - 1], &ForwardOptions::default()).unwrap();
        for t in 0..len - 1 {
            prop_assert_eq!(full.logits.row(t), prefix.logits.row(t));
        }
    }

    #[test]
    fn checkpoint_round_trip_is_f32_exact(seed in 0u64..1000) {
        let w = random_model(tiny_config(2, 2), seed).rounded_to_f32();
        let back = decode_checkpoint(&encode_checkpoint(&w).unwrap()).unwrap();
        prop_assert_eq!(back, w);
    }

    #[test]
    fn parameter_count_falls_with_each_removal(seed in 0u64..1000) {
        let cfg = tiny_config(3, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = random_mask(&cfg, &mut rng);
        let full = count_parameters(&cfg, &PruneMask::full(&cfg));
        let got = count_parameters(&cfg, &mask);
        let head = 4 * cfg.embed_dim * cfg.head_dim;
        let ffn = 2 * cfg.embed_dim * cfg.ffn_dim + 2 * cfg.embed_dim;
        let removed = (cfg.num_heads() - mask.heads_kept()) * head + (cfg.num_layers - mask.ffns_kept()) * ffn;
        prop_assert_eq!(full.total() - got.total(), removed as u64);
    }
}
