mod common;

use attn_scalpel::eval::evaluate_accuracy;
use attn_scalpel::importance::*;
use attn_scalpel::model::{forward, ForwardOptions, HeadEdit, HeadIntervention, PruneMask};
use attn_scalpel::tensor::Tensor;
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tape_gradients_match_finite_differences() {
    let w = random_model(tiny_config(2, 2), 3);
    for (i, ex) in random_examples(&w.config, 3, 8).iter().enumerate() {
        let err = finite_difference_error(&w, ex, 5, 1e-3, i as u64);
        assert!(err < 1e-3, "relative error {err}");
    }
}

#[test]
fn zero_value_head_scores_exactly_zero() {
    let mut w = random_model(tiny_config(2, 2), 5);
    w.layers[1].heads[0].wv = Tensor::zeros(w.layers[1].heads[0].wv.shape().to_vec());
    let data = dataset("z", random_examples(&w.config, 4, 1));
    let m = head_importance(&w, &data).unwrap().matrix;
    assert_eq!(m.get(1, 0), 0.0);
    assert!(m.values.iter().filter(|&&v| v > 0.0).count() >= 3);
}

#[test]
fn single_example_importance_is_its_sensitivity() {
    let w = random_model(tiny_config(2, 3), 6);
    let examples = random_examples(&w.config, 1, 2);
    let direct = example_head_sensitivity(&w, &examples[0]).unwrap();
    let m = head_importance(&w, &dataset("one", examples)).unwrap().matrix;
    assert_eq!(m.values, direct);
}

/// Mean over examples of `|L(scale 1 − ε) − L(1)| / ε` for one head.
fn scaling_prediction(w: &attn_scalpel::model::ModelWeights, examples: &[attn_scalpel::eval::PreparedExample], l: usize, h: usize, eps: f64) -> f64 {
    examples
        .iter()
        .map(|ex| {
            let seq = ex.gold_sequence();
            let loss = |opts: &ForwardOptions| gold_nll(&rows(&forward(w, None, &seq, opts).unwrap().logits), &seq, ex.prompt.len());
            let base = loss(&ForwardOptions::default());
            let scaled = loss(&ForwardOptions {
                interventions: vec![HeadIntervention { layer: l, head: h, edit: HeadEdit::Scale(1.0 - eps) }],
                ..ForwardOptions::default()
            });
            (scaled - base).abs() / eps
        })
        .sum::<f64>()
        / examples.len() as f64
}

#[test]
fn top_head_score_matches_first_order_loss_change() {
    let w = random_model(tiny_config(2, 2), 9);
    let examples = random_examples(&w.config, 5, 4);
    let m = head_importance(&w, &dataset("taylor", examples.clone())).unwrap().matrix;
    let top = (0..m.len()).max_by(|&a, &b| m.values[a].total_cmp(&m.values[b])).unwrap();
    let (l, h) = (top / m.heads, top % m.heads);
    let predicted = scaling_prediction(&w, &examples, l, h, 1e-2);
    let rel = (predicted - m.values[top]).abs() / m.values[top];
    assert!(rel < 0.1, "score {} vs loss change {predicted}", m.values[top]);
}

#[test]
fn oracle_scores_match_two_standalone_evaluations() {
    let w = random_model(tiny_config(3, 2), 11);
    let data = dataset("oracle", random_examples(&w.config, 20, 5));
    let base = evaluate_accuracy(&w, None, &data).unwrap().accuracy;
    let m = ffn_importance(&w, &data).unwrap();
    assert_eq!(m.len(), 3);
    for l in 0..3 {
        let mut mask = PruneMask::full(&w.config);
        mask.set_ffn(l, false);
        let pruned = evaluate_accuracy(&w, Some(&mask), &data).unwrap().accuracy;
        assert_eq!(m.get(l, 0), base - pruned);
        assert_eq!(oracle_importance(&w, &data, l).unwrap(), base - pruned);
    }
}

#[test]
fn oracle_rejects_bad_index() {
    let w = random_model(tiny_config(2, 2), 1);
    let data = dataset("x", random_examples(&w.config, 2, 1));
    assert!(oracle_importance(&w, &data, 2).is_err());
}

#[test]
fn aggregate_equals_scalar_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ms: Vec<ImportanceMatrix> = (0..3)
        .map(|i| {
            let values = (0..6).map(|_| rng.gen_range(0.0..2.0)).collect();
            ImportanceMatrix::new(ComponentKind::Head, 2, 3, values, format!("t{i}"), 1).unwrap()
        })
        .collect();
    let agg = aggregate_importance(&ms).unwrap();
    assert_eq!(agg.task, "aggregate");
    for c in 0..6 {
        let mut s = 0.0;
        for m in &ms {
            s += m.values[c];
        }
        assert!((agg.values[c] - s / 3.0).abs() < 1e-12);
    }
}

#[test]
fn aggregate_rejects_mixed_shapes() {
    let a = ImportanceMatrix::new(ComponentKind::Head, 1, 2, vec![0.1, 0.2], "a", 0).unwrap();
    let b = ImportanceMatrix::new(ComponentKind::Head, 2, 1, vec![0.1, 0.2], "b", 0).unwrap();
    let c = ImportanceMatrix::new(ComponentKind::Ffn, 2, 1, vec![0.1, 0.2], "c", 0).unwrap();
    assert!(aggregate_importance(&[a.clone(), b]).is_err());
    assert!(aggregate_importance(&[a, c]).is_err());
    assert!(aggregate_importance(&[]).is_err());
}

#[test]
fn csv_round_trip_and_kind_detection() {
    let m = ImportanceMatrix::new(ComponentKind::Head, 2, 2, vec![0.5, 0.25, 1e-300, 3.0], "t", 2).unwrap();
    let text = m.to_csv().unwrap();
    assert_eq!(ImportanceMatrix::csv_kind(&text).unwrap(), ComponentKind::Head);
    assert_eq!(ImportanceMatrix::from_csv(&text, ComponentKind::Head, "t", 2).unwrap(), m);
    let f = ImportanceMatrix::new(ComponentKind::Ffn, 3, 1, vec![-0.1, 0.0, 0.2], "t", 0).unwrap();
    let text = f.to_csv().unwrap();
    assert_eq!(ImportanceMatrix::csv_kind(&text).unwrap(), ComponentKind::Ffn);
    assert_eq!(ImportanceMatrix::from_csv(&text, ComponentKind::Ffn, "t", 0).unwrap(), f);
    assert!(ImportanceMatrix::from_csv(&text, ComponentKind::Head, "t", 0).is_err());
}

#[test]
fn negative_head_scores_are_rejected() {
    assert!(ImportanceMatrix::new(ComponentKind::Head, 1, 1, vec![-0.1], "t", 0).is_err());
    assert!(ImportanceMatrix::new(ComponentKind::Ffn, 1, 1, vec![-0.1], "t", 0).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ranking_agrees_with_triple_sort(values in proptest::collection::vec(0u8..5, 12)) {
        let values: Vec<f64> = values.into_iter().map(f64::from).collect();
        let m = ImportanceMatrix::new(ComponentKind::Head, 3, 4, values.clone(), "t", 0).unwrap();
        let mut triples: Vec<(f64, usize, usize)> = (0..12).map(|i| (values[i], i / 4, i % 4)).collect();
        triples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let expected: Vec<(usize, usize)> = triples.into_iter().map(|(_, l, h)| (l, h)).collect();
        prop_assert_eq!(ranking_from(&m).order, expected);
    }

    #[test]
    fn aggregate_is_order_free_and_idempotent(seed in 0u64..1000, n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ms: Vec<ImportanceMatrix> = (0..n)
            .map(|i| {
                let values = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
                ImportanceMatrix::new(ComponentKind::Head, 2, 2, values, format!("t{i}"), 0).unwrap()
            })
            .collect();
        let mut rev = ms.clone();
        rev.reverse();
        let a = aggregate_importance(&ms).unwrap();
        let b = aggregate_importance(&rev).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let copies = vec![ms[0].clone(); n];
        for (x, y) in aggregate_importance(&copies).unwrap().values.iter().zip(&ms[0].values) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn head_importance_is_finite_and_nonnegative(seed in 0u64..200) {
        let w = random_model(tiny_config(2, 2), seed);
        let data = dataset("p", random_examples(&w.config, 3, seed));
        let m = head_importance(&w, &data).unwrap().matrix;
        prop_assert!(m.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}
