use std::collections::HashMap;

use coma_core::masking::{sample_mask_pair, sample_random_mask, CoverageStats};
use coma_core::rng::{stream_rng, Stream};

#[test]
fn all_visible_sets_equally_likely() {
    let draws = 100_000u64;
    let mut counts: HashMap<u8, u64> = HashMap::new();
    let mut rng = stream_rng(2024, Stream::Mask, 0);
    for _ in 0..draws {
        let pair = sample_mask_pair(8, 0.5, &mut rng).unwrap();
        let key = pair.adaptive_mask().iter().enumerate().fold(0u8, |k, (i, &b)| k | (u8::from(b) << i));
        *counts.entry(key).or_default() += 1;
    }
    assert_eq!(counts.len(), 70);
    assert!(counts.keys().all(|k| k.count_ones() == 4));

    let p = 1.0 / 70.0;
    let expected = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    let mut chi2 = 0.0;
    for &c in counts.values() {
        assert!((c as f64 - expected).abs() <= 5.0 * sigma, "count {c} vs {expected}");
        chi2 += (c as f64 - expected).powi(2) / expected;
    }
    // 69 degrees of freedom: mean 69, sd ≈ 11.7
    assert!(chi2 < 69.0 + 5.0 * (2.0f64 * 69.0).sqrt(), "chi2 = {chi2}");
}

#[test]
fn complementary_coverage_is_exact_and_binomial() {
    let (n, iters) = (196, 1600u64);
    let mut stats = CoverageStats::new(n);
    for t in 0..iters {
        let pair = sample_mask_pair(n, 0.6, &mut stream_rng(5, Stream::Mask, t)).unwrap();
        stats.accumulate(&pair).unwrap();
    }
    assert!(stats.union_counts.iter().all(|&c| c == iters));
    let report = stats.report();
    assert_eq!(report.union.std, 0.0);

    // 78 of 196 kept, so each patch is removed with probability 118/196.
    let q = 118.0 / 196.0;
    assert!((report.adaptive.mean - iters as f64 * q).abs() < 1e-9);
    let binomial_sd = (1600.0f64 * 0.6 * 0.4).sqrt();
    assert!((report.adaptive.std / binomial_sd - 1.0).abs() <= 0.2, "std {}", report.adaptive.std);
    assert_eq!(report.csv.lines().count(), n + 1);
    assert!(report.union_pgm.starts_with(b"P5\n14 14\n255\n"));
}

#[test]
fn single_branch_leaves_coverage_uneven() {
    let (n, iters) = (196, 1600u64);
    let mut single = CoverageStats::new(n);
    let mut paired = CoverageStats::new(n);
    for t in 0..iters {
        let mask = sample_random_mask(n, 0.6, &mut stream_rng(5, Stream::Mask, t)).unwrap();
        single.accumulate_single(&mask).unwrap();
        let pair = sample_mask_pair(n, 0.6, &mut stream_rng(5, Stream::Mask, t)).unwrap();
        paired.accumulate(&pair).unwrap();
    }
    let s = single.report();
    let p = paired.report();
    assert!(s.union.std > 0.0);
    assert!(s.union.mean < iters as f64);
    assert_eq!(single.adaptive_counts, paired.adaptive_counts);
    assert_eq!(s.adaptive, p.adaptive);
}
