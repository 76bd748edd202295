use attn_scalpel::importance::{ComponentKind, Ranking};
use attn_scalpel::stats::*;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ranking(order: Vec<(usize, usize)>, layers: usize, heads: usize) -> Ranking {
    Ranking::from_order(ComponentKind::Head, layers, heads, order).unwrap()
}

fn random_ranking(layers: usize, heads: usize, rng: &mut ChaCha8Rng) -> Ranking {
    let mut order: Vec<(usize, usize)> = (0..layers).flat_map(|l| (0..heads).map(move |h| (l, h))).collect();
    order.shuffle(rng);
    ranking(order, layers, heads)
}

/// `1 − 6Σd²/(n(n²−1))`, valid without ties.
fn rank_difference_rho(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| v.iter().filter(|y| *y < x).count() as f64 + 1.0).collect() };
    let (ra, rb) = (rank(a), rank(b));
    let n = a.len() as f64;
    let d2: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - y) * (x - y)).sum();
    1.0 - 6.0 * d2 / (n * (n * n - 1.0))
}

#[test]
fn reference_values() {
    // reference values from an independent statistics package
    let s = spearman(&[1.0, 2.0, 2.0, 3.0, 5.0, 4.0], &[2.0, 1.0, 3.0, 3.0, 6.0, 5.0]).unwrap();
    assert!((s.rho - 0.8676470588235294).abs() < 1e-12);
    assert!((s.p_value - 0.025116718400162795).abs() < 1e-9);
    let a: Vec<f64> = (1..=10).map(f64::from).collect();
    let b = [2.0, 1.0, 4.0, 3.0, 6.0, 5.0, 8.0, 7.0, 10.0, 9.0];
    let s = spearman(&a, &b).unwrap();
    assert!((s.rho - 0.9393939393939393).abs() < 1e-12);
    assert!((s.p_value - 5.484052998513666e-05).abs() < 1e-10);
    let s = spearman(&[0.3, 0.1, 0.9, 0.4, 0.2], &[0.5, 0.4, 0.3, 0.2, 0.1]).unwrap();
    assert!((s.rho + 0.1).abs() < 1e-12);
    assert!((s.p_value - 0.8728885715695383).abs() < 1e-9);
}

#[test]
fn extremes_and_errors() {
    let a = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(spearman(&a, &[10.0, 20.0, 30.0, 40.0]).unwrap().rho, 1.0);
    assert_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap().rho, -1.0);
    assert_eq!(spearman(&a, &a).unwrap().p_value, 0.0);
    // Σd² = 4 over five items
    let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap().rho;
    assert!((r - 0.8).abs() < 1e-12);
    assert!(spearman(&a, &[1.0, 2.0]).is_err());
    assert!(spearman(&a[..2], &a[..2]).is_err());
    assert!(spearman(&a, &[1.0; 4]).is_err());
}

#[test]
fn ties_get_average_ranks() {
    assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    assert_eq!(average_ranks(&[0.0; 3]), vec![2.0; 3]);
}

#[test]
fn population_variance() {
    let (m, v) = mean_variance(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!((m, v), (2.5, 1.25));
    assert_eq!(mean_variance(&[0.7]).unwrap(), (0.7, 0.0));
    assert!(mean_variance(&[]).is_err());
}

#[test]
fn overlap_of_identical_and_reversed_rankings() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = random_ranking(2, 5, &mut rng);
    assert_eq!(topk_overlap(&r, &r, 0.3).unwrap(), 1.0);
    let mut rev = r.clone();
    rev.order.reverse();
    assert_eq!(topk_overlap(&r, &rev, 0.3).unwrap(), 0.0);
    assert_eq!(topk_overlap(&r, &rev, 1.0).unwrap(), 1.0);
    assert!(topk_overlap(&r, &r, 0.05).is_err());
    assert!(topk_overlap(&r, &r, 0.0).is_err());
    assert_eq!(spearman_rankings(&r, &rev).unwrap().rho, -1.0);
}

#[test]
fn random_overlap_concentrates_at_k_fraction() {
    let (n, k) = (40usize, 12usize);
    let k_frac = k as f64 / n as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let trials = 1000;
    let mean = (0..trials)
        .map(|_| topk_overlap(&random_ranking(4, 10, &mut rng), &random_ranking(4, 10, &mut rng), k_frac).unwrap())
        .sum::<f64>()
        / trials as f64;
    // hypergeometric variance of the shared count, as a fraction of k
    let var_count = k as f64 * k_frac * (1.0 - k_frac) * (n - k) as f64 / (n - 1) as f64;
    let sd = var_count.sqrt() / k as f64 / (trials as f64).sqrt();
    assert!((mean - k_frac).abs() < 3.0 * sd, "mean {mean}, expected {k_frac} ± {}", 3.0 * sd);
}

#[test]
fn correlation_report_matches_pairwise_calls() {
    let scores = vec![vec![0.1, 0.5, 0.3, 0.9], vec![0.2, 0.4, 0.6, 0.8], vec![0.9, 0.1, 0.4, 0.0]];
    let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let r = CorrelationReport::new("x", names, &scores).unwrap();
    for i in 0..3 {
        assert_eq!(r.rho[i][i], Some(1.0));
        for j in 0..3 {
            if i != j {
                let s = spearman(&scores[i], &scores[j]).unwrap();
                assert_eq!(r.rho[i][j], Some(s.rho));
                assert_eq!(r.p_value[i][j], Some(s.p_value));
                assert_eq!(r.rho[i][j], r.rho[j][i]);
            }
        }
    }
    assert!(r.rho_csv().unwrap().starts_with("name,a,b,c\n"));
}

#[test]
fn constant_scores_leave_holes() {
    let scores = vec![vec![1.0; 4], vec![0.2, 0.4, 0.6, 0.8]];
    let r = CorrelationReport::new("x", vec!["a".into(), "b".into()], &scores).unwrap();
    assert_eq!(r.rho[0][1], None);
}

#[test]
fn cross_shot_summary_is_mean_and_variance() {
    let shots = vec![0, 1];
    let per_task: Vec<CorrelationReport> = [vec![0.1, 0.2, 0.3, 0.4], vec![0.4, 0.3, 0.2, 0.1]]
        .iter()
        .enumerate()
        .map(|(i, alt)| {
            CorrelationReport::new(format!("t{i}"), vec!["0".into(), "1".into()], &[vec![0.1, 0.2, 0.3, 0.4], alt.clone()]).unwrap()
        })
        .collect();
    let s = CrossShotSummary::new(shots, vec!["t0".into(), "t1".into()], &per_task).unwrap();
    assert_eq!(s.mean[0][1], 0.0);
    assert_eq!(s.variance[0][1], 1.0);
    assert_eq!((s.mean[0][0], s.variance[1][1]), (1.0, 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn agrees_with_rank_difference_formula(seed in 0u64..100_000, n in 3usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut b = a.clone();
        a.shuffle(&mut rng);
        b.shuffle(&mut rng);
        let s = spearman(&a, &b).unwrap();
        prop_assert!((s.rho - rank_difference_rho(&a, &b)).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&s.p_value));
    }

    #[test]
    fn invariant_under_monotone_maps(values in proptest::collection::vec(-5.0f64..5.0, 3..20), other in proptest::collection::vec(-5.0f64..5.0, 20)) {
        let b = &other[..values.len()];
        prop_assume!(values.iter().any(|v| *v != values[0]) && b.iter().any(|v| *v != b[0]));
        let mapped: Vec<f64> = values.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
        let x = spearman(&values, b).unwrap();
        let y = spearman(&mapped, b).unwrap();
        prop_assert!((x.rho - y.rho).abs() < 1e-12);
        let z = spearman(b, &values).unwrap();
        prop_assert!((x.rho - z.rho).abs() < 1e-12);
        let neg: Vec<f64> = values.iter().map(|v| -v).collect();
        prop_assert!((spearman(&neg, b).unwrap().rho + x.rho).abs() < 1e-12);
    }

    #[test]
    fn overlap_matches_brute_force(seed in 0u64..100_000, k_frac in 0.1f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_ranking(3, 4, &mut rng), random_ranking(3, 4, &mut rng));
        let k = (k_frac * 12.0 + 1e-9).floor() as usize;
        let top = |r: &Ranking| r.order[12 - k..].to_vec();
        let (ta, tb) = (top(&a), top(&b));
        let shared = ta.iter().filter(|x| tb.contains(x)).count();
        prop_assert_eq!(topk_overlap(&a, &b, k_frac).unwrap(), shared as f64 / k as f64);
        prop_assert_eq!(topk_overlap(&a, &b, k_frac).unwrap(), topk_overlap(&b, &a, k_frac).unwrap());
    }
}
