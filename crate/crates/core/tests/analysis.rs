use proptest::prelude::*;
use trajval::mechanism::{bootstrap_ci, conditioned_correlation, spearman};

fn distinct(v: Vec<f64>) -> Vec<f64> {
    // proptest may repeat values; nudge by index so ranks are strict and known
    v.into_iter()
        .enumerate()
        .map(|(i, x)| x + i as f64 * 1e-6)
        .collect()
}

proptest! {
    #[test]
    fn spearman_ignores_monotone_transforms(
        x in prop::collection::vec(-10.0..10.0f64, 5..40),
        seed in any::<u64>(),
    ) {
        let x = distinct(x);
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 1.3 + ((seed >> (i % 60)) & 7) as f64).sin()).collect();
        let r = spearman(&x, &y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| (v / 4.0).exp()).collect();
        let ty: Vec<f64> = y.iter().map(|v| v * v * v + 2.0 * v).collect();
        prop_assert!((spearman(&tx, &ty).unwrap() - r).abs() <= 1e-12);
        prop_assert!((-1.0..=1.0).contains(&r));
    }

    #[test]
    fn conditioned_correlation_is_bounded(
        a in prop::collection::vec(-1.0..1.0f64, 12..40),
        b in prop::collection::vec(-1.0..1.0f64, 12..40),
    ) {
        let n = a.len().min(b.len());
        let bins: Vec<usize> = (0..n).map(|i| i * 3 / n).collect();
        let r = conditioned_correlation(&a[..n], &b[..n], &bins).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
    }

    #[test]
    fn bootstrap_interval_contains_point(v in prop::collection::vec(-100.0..100.0f64, 3..30), seed: u64) {
        let mean = |idx: &[usize]| Ok(idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len() as f64);
        let ci = bootstrap_ci(v.len(), mean, 200, seed).unwrap();
        prop_assert!(ci.ci_lo <= ci.point && ci.point <= ci.ci_hi);
        let again = bootstrap_ci(v.len(), mean, 200, seed).unwrap();
        prop_assert_eq!(ci, again);
    }
}
