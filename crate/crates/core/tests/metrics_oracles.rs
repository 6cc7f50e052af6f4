mod common;

use beamsr::metrics::{self, box_stats, error_histogram, SsimConstants, DEFAULT_BIN_WIDTH};
use common::*;

#[test]
fn random_pairs_match_brute_force() {
    let mut r = rng(3);
    for _ in 0..100 {
        let a = random_image(&mut r, 8, 8);
        let b = random_image(&mut r, 8, 8);
        assert!((metrics::mse(&a, &b).unwrap() - oracle_mse(&a, &b)).abs() < 1e-12);
        assert!((metrics::mae(&a, &b).unwrap() - oracle_mae(&a, &b)).abs() < 1e-12);
        assert!((metrics::psnr(&a, &b).unwrap() - oracle_psnr(&a, &b)).abs() < 1e-9);
        let s = metrics::ssim(&a, &b, &SsimConstants::default()).unwrap();
        assert!((s - oracle_ssim(&a, &b)).abs() < 1e-9);
        assert_eq!(
            error_histogram(&a, &b, DEFAULT_BIN_WIDTH).unwrap(),
            oracle_histogram(&a, &b)
        );
    }
}

#[test]
fn self_comparison_sentinels() {
    let mut r = rng(4);
    for _ in 0..20 {
        let a = random_image(&mut r, 8, 8);
        assert_eq!(
            metrics::ssim(&a, &a, &SsimConstants::default()).unwrap(),
            1.0
        );
        assert_eq!(metrics::psnr(&a, &a).unwrap(), f64::INFINITY);
    }
}

#[test]
fn histogram_on_quantized_levels() {
    // errors of exactly 0, 4, 5, 9, 10 and 255 grey levels
    let t = beamsr::UsImage::new(1, 6, vec![0.0; 6]).unwrap();
    let e = beamsr::UsImage::new(
        1,
        6,
        [0.0, 4.0, 5.0, 9.0, 10.0, 255.0]
            .map(|v| v / 255.0)
            .to_vec(),
    )
    .unwrap();
    let h = error_histogram(&t, &e, DEFAULT_BIN_WIDTH).unwrap();
    assert_eq!(h.len(), 51);
    assert_eq!((h[0], h[1], h[2], h[50]), (2, 2, 1, 1));
    assert_eq!(h, oracle_histogram(&t, &e));
}

/// Linear-interpolation quantiles computed independently by sorting.
#[test]
fn box_stats_against_sorted_oracle() {
    use rand::Rng;
    let mut r = rng(5);
    for n in 1..40 {
        let v: Vec<f64> = (0..n).map(|_| r.random_range(20.0..45.0)).collect();
        let mut s = v.clone();
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| {
            let h = p * (n - 1) as f64;
            let lo = h.floor() as usize;
            s[lo] + (h - lo as f64) * (s[(lo + 1).min(n - 1)] - s[lo])
        };
        let b = box_stats(&v).unwrap();
        assert!((b.median - q(0.5)).abs() < 1e-12);
        assert!((b.q1 - q(0.25)).abs() < 1e-12);
        assert!((b.q3 - q(0.75)).abs() < 1e-12);
        assert!((b.mean - v.iter().sum::<f64>() / n as f64).abs() < 1e-12);
        let iqr = b.q3 - b.q1;
        let inside: Vec<f64> = s
            .iter()
            .copied()
            .filter(|x| *x >= b.q1 - 1.5 * iqr && *x <= b.q3 + 1.5 * iqr)
            .collect();
        assert_eq!(b.whisker_low, inside[0].min(b.q1));
        assert_eq!(b.whisker_high, inside[inside.len() - 1].max(b.q3));
    }
}

#[test]
fn eight_bit_differences_bin_by_integer_difference() {
    for a in 0..=255u32 {
        let row: Vec<f64> = (0..=255u32).map(|b| b as f64 / 255.0).collect();
        let t = beamsr::UsImage::new(1, 256, vec![a as f64 / 255.0; 256]).unwrap();
        let e = beamsr::UsImage::new(1, 256, row).unwrap();
        let mut expect = vec![0u64; 51];
        for b in 0..=255u32 {
            expect[((a.abs_diff(b) / 5) as usize).min(50)] += 1;
        }
        assert_eq!(
            error_histogram(&t, &e, DEFAULT_BIN_WIDTH).unwrap(),
            expect,
            "level {a}"
        );
    }
}
