use fedproj::eval::{compare_aggregations, wilcoxon_exact_p, wilcoxon_normal_p, wilcoxon_signed_rank, TestMethod};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force two-sided p over all 2^n sign assignments (no ties).
fn enumerate_p(d: &[f64]) -> f64 {
    let n = d.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut rank = vec![0.0; n];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = (r + 1) as f64;
    }
    let w_plus: f64 = (0..n).filter(|&i| d[i] > 0.0).map(|i| rank[i]).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w = w_plus.min(total - w_plus);
    let hits = (0..1u32 << n)
        .filter(|mask| {
            let s: f64 = (0..n).filter(|&i| mask & (1 << i) != 0).map(|i| rank[i]).sum();
            s <= w
        })
        .count();
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}

#[test]
fn exact_p_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [5, 8, 12] {
        for _ in 0..10 {
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.5)).collect();
            let p = wilcoxon_exact_p(&d, &vec![0.0; n]).unwrap();
            assert!((p - enumerate_p(&d)).abs() < 1e-12, "{d:?}");
        }
    }
}

#[test]
fn exact_and_normal_agree_at_twenty() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let shift = rng.random_range(-1.0..1.0);
        let a: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0) + shift).collect();
        let b: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (e, n) = (wilcoxon_exact_p(&a, &b).unwrap(), wilcoxon_normal_p(&a, &b).unwrap());
        assert!((e - n).abs() <= 0.01, "exact {e} normal {n}");
    }
}

#[test]
fn method_switches_above_twenty_pairs() {
    let a: Vec<f64> = (0..21).map(|i| i as f64 * 0.1 + 1.0).collect();
    let b = vec![0.0; 21];
    assert_eq!(wilcoxon_signed_rank(&a[..20], &b[..20]).unwrap().method, TestMethod::Exact);
    assert_eq!(wilcoxon_signed_rank(&a, &b).unwrap().method, TestMethod::Normal);
}

#[test]
fn swapping_arguments_leaves_p_unchanged() {
    let a = [0.3, 1.2, -0.4, 0.8, 0.9, -0.1, 0.5];
    let b = [0.0; 7];
    let ab = wilcoxon_signed_rank(&a, &b).unwrap();
    let ba = wilcoxon_signed_rank(&b, &a).unwrap();
    assert_eq!(ab.p_value, ba.p_value);
    assert_eq!(ab.statistic, ba.statistic);
}

#[test]
fn identical_methods_are_degenerate() {
    let s = vec![70.0, 71.5, 69.0, 72.0, 70.5];
    let tests = compare_aggregations(&[("EAA".into(), s.clone()), ("W2B".into(), s)], "acc").unwrap();
    assert_eq!(tests.len(), 1);
    assert!(tests[0].result.is_none());
    assert!(compare_aggregations(&[("EAA".into(), vec![1.0; 5])], "acc").is_err());
}
