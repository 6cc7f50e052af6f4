mod common;

use beamsr::dataio::{decode_pgm, encode_pgm, Split};
use beamsr::metrics::{self, error_histogram, SsimConstants, DEFAULT_BIN_WIDTH};
use beamsr::netmath::Tensor;
use beamsr::resample::{upsample_cubic, KernelParams};
use beamsr::train::{lr_schedule, masked_log_loss, LossParams, TrainConfig};
use beamsr::video::{acquisition_frequency, AcquisitionModel};
use beamsr::{decimate, keys_kernel, SamplingScheme, UsImage};
use proptest::prelude::*;

fn scheme() -> impl Strategy<Value = SamplingScheme> {
    prop_oneof![Just(SamplingScheme::X2), Just(SamplingScheme::X4)]
}

fn image(
    lines: std::ops::Range<usize>,
    depth: std::ops::Range<usize>,
    lo: f64,
    hi: f64,
) -> impl Strategy<Value = UsImage> {
    (lines, depth).prop_flat_map(move |(l, d)| {
        proptest::collection::vec(lo..=hi, l * d)
            .prop_map(move |px| UsImage::new(l, d, px).unwrap())
    })
}

fn pair() -> impl Strategy<Value = (UsImage, UsImage)> {
    (2usize..12, 2usize..12).prop_flat_map(|(l, d)| {
        let v = || {
            proptest::collection::vec(0.0..=1.0f64, l * d)
                .prop_map(move |px| UsImage::new(l, d, px).unwrap())
        };
        (v(), v())
    })
}

proptest! {
    #[test]
    fn kernel_partition_of_unity(t in 0.0..1.0f64, a in -1.0..-0.01f64) {
        let p = KernelParams::new(a).unwrap();
        let s: f64 = (-1..=2).map(|j| keys_kernel(t - j as f64, &p)).sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kernel_is_even(x in -3.0..3.0f64) {
        let p = KernelParams::default();
        prop_assert_eq!(keys_kernel(x, &p), keys_kernel(-x, &p));
    }

    #[test]
    fn cubic_reproduces_quadratics(
        s in scheme(),
        // three acquired lines are needed to pin down a quadratic
        lines in 9usize..40,
        depth in 1usize..6,
        coef in proptest::collection::vec((0.3..0.5f64, -0.15..0.15f64, -0.15..0.15f64), 6),
    ) {
        let f = |l: usize, d: usize| {
            let (a, b, c) = coef[d % coef.len()];
            let x = l as f64 / lines as f64;
            a + b * x + c * x * x
        };
        let target = UsImage::from_fn(lines, depth, f).unwrap();
        let up = upsample_cubic(&decimate(&target, s).unwrap(), s, lines).unwrap();
        for l in 0..lines {
            for d in 0..depth {
                prop_assert!((up.get(l, d) - f(l, d)).abs() < 1e-5, "line {} depth {}", l, d);
            }
        }
    }

    #[test]
    fn cubic_is_interpolating(s in scheme(), img in image(8..40, 1..8, 0.0, 1.0)) {
        let up = upsample_cubic(&decimate(&img, s).unwrap(), s, img.lines()).unwrap();
        for l in (0..img.lines()).step_by(s.stride()) {
            prop_assert_eq!(up.line(l), img.line(l));
        }
    }

    #[test]
    fn cubic_is_linear_without_clamping(
        s in scheme(),
        a in image(8..24, 1..5, 0.4, 0.6),
        alpha in 0.0..0.5f64,
        beta in 0.0..0.5f64,
    ) {
        // a second image of the same shape, derived deterministically
        let b = UsImage::from_fn(a.lines(), a.depth(), |l, d| 0.4 + 0.2 * (((l * 7 + d * 3) % 11) as f64 / 10.0)).unwrap();
        let mix = UsImage::from_fn(a.lines(), a.depth(), |l, d| alpha * a.get(l, d) + beta * b.get(l, d)).unwrap();
        let up = |x: &UsImage| upsample_cubic(&decimate(x, s).unwrap(), s, x.lines()).unwrap();
        let (ua, ub, um) = (up(&a), up(&b), up(&mix));
        for i in 0..um.len() {
            let expect = alpha * ua.pixels()[i] + beta * ub.pixels()[i];
            prop_assert!((um.pixels()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn decimate_keeps_acquired_lines(s in scheme(), img in image(8..40, 1..8, 0.0, 1.0)) {
        let low = decimate(&img, s).unwrap();
        prop_assert_eq!(low.lines(), img.lines().div_ceil(s.stride()));
        prop_assert_eq!(low.depth(), img.depth());
        for k in 0..low.lines() {
            prop_assert_eq!(low.line(k), img.line(k * s.stride()));
        }
    }

    #[test]
    fn decimate_composes(img in image(2..10, 1..6, 0.0, 1.0)) {
        let img = UsImage::from_fn(img.lines() * 4, img.depth(), |l, d| img.get(l / 4, d) * ((l % 4) as f64 + 1.0) / 4.0).unwrap();
        let twice = decimate(&decimate(&img, SamplingScheme::X2).unwrap(), SamplingScheme::X2).unwrap();
        prop_assert_eq!(twice, decimate(&img, SamplingScheme::X4).unwrap());
    }

    #[test]
    fn metrics_are_symmetric((a, b) in pair()) {
        prop_assert_eq!(metrics::mse(&a, &b).unwrap(), metrics::mse(&b, &a).unwrap());
        prop_assert_eq!(metrics::mae(&a, &b).unwrap(), metrics::mae(&b, &a).unwrap());
        let c = SsimConstants::default();
        prop_assert_eq!(metrics::ssim(&a, &b, &c).unwrap(), metrics::ssim(&b, &a, &c).unwrap());
        prop_assert_eq!(error_histogram(&a, &b, DEFAULT_BIN_WIDTH).unwrap(), error_histogram(&b, &a, DEFAULT_BIN_WIDTH).unwrap());
    }

    #[test]
    fn mae_bounded_by_rmse((a, b) in pair()) {
        let mae = metrics::mae(&a, &b).unwrap();
        let rmse = metrics::mse(&a, &b).unwrap().sqrt();
        prop_assert!(mae <= rmse + 1e-15);
    }

    #[test]
    fn histogram_counts_every_pixel((a, b) in pair(), w in 0.001..0.5f64) {
        let h = error_histogram(&a, &b, w).unwrap();
        prop_assert_eq!(h.iter().sum::<u64>(), a.len() as u64);
    }

    #[test]
    fn ssim_at_most_one((a, b) in pair()) {
        prop_assert!(metrics::ssim(&a, &b, &SsimConstants::default()).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn halving_lines_doubles_frequency(c in 1000.0..2000.0f64, d in 0.01..0.3f64, l in 16.0..512.0f64) {
        let f = |lines| acquisition_frequency(&AcquisitionModel { c, depth: d, lines }).unwrap();
        prop_assert_eq!(f(l / 2.0), 2.0 * f(l));
        prop_assert_eq!(f(l / 4.0), 4.0 * f(l));
    }

    #[test]
    fn acquired_lines_never_touch_the_loss(
        s in scheme(),
        seed in any::<u64>(),
        noise in proptest::collection::vec(-1.0..1.0f64, 16 * 6),
    ) {
        let mut r = common::rng(seed);
        let pred = common::random_tensor(&mut r, [1, 1, 16, 6], 0.0, 1.0);
        let target = common::random_tensor(&mut r, [1, 1, 16, 6], 0.0, 1.0);
        let lp = LossParams::new(s);
        let (base, g) = masked_log_loss(&pred, &target, &lp).unwrap();
        let mut data = pred.data().to_vec();
        for l in (0..16).step_by(s.stride()) {
            for d in 0..6 {
                data[l * 6 + d] += noise[l * 6 + d];
                prop_assert_eq!(g.data()[l * 6 + d], 0.0);
            }
        }
        let moved = Tensor::new([1, 1, 16, 6], data).unwrap();
        prop_assert_eq!(masked_log_loss(&moved, &target, &lp).unwrap().0, base);
    }

    #[test]
    fn loss_grows_with_error(seed in any::<u64>(), idx in 0usize..48, bump in 0.0..0.5f64) {
        let mut r = common::rng(seed);
        let pred = common::random_tensor(&mut r, [1, 1, 8, 6], 0.0, 1.0);
        let target = common::random_tensor(&mut r, [1, 1, 8, 6], 0.0, 1.0);
        let lp = LossParams::new(SamplingScheme::X2);
        let base = masked_log_loss(&pred, &target, &lp).unwrap().0;
        let mut data = pred.data().to_vec();
        let e = data[idx] - target.data()[idx];
        data[idx] += if e >= 0.0 { bump } else { -bump };
        let grown = masked_log_loss(&Tensor::new([1, 1, 8, 6], data).unwrap(), &target, &lp).unwrap().0;
        prop_assert!(grown >= base);
    }

    #[test]
    fn schedule_is_monotone(epochs in 1usize..300, start in 1e-4..1e-2f64, ratio in 1e-4..1.0f64) {
        let cfg = TrainConfig { epochs, lr_start: start, lr_end: start * ratio, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..epochs).map(|e| lr_schedule(&cfg, e).unwrap()).collect();
        prop_assert_eq!(lrs[0], start);
        if epochs > 1 {
            prop_assert_eq!(lrs[epochs - 1], start * ratio);
        }
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(lr_schedule(&cfg, epochs).is_err());
    }

    #[test]
    fn pgm_round_trip(img in image(1..20, 1..20, 0.0, 1.0)) {
        let back = decode_pgm(&encode_pgm(&img)).unwrap();
        prop_assert_eq!((back.lines(), back.depth()), (img.lines(), img.depth()));
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_partition_the_corpus(count in 3usize..40, seed in any::<u64>(), s in scheme()) {
        let ds = common::phantom_dataset(seed, count, 16, s);
        let m = &ds.manifest;
        prop_assert_eq!(m.entries.len(), count);
        let sizes = m.split_ratios.sizes(count).unwrap();
        for (split, size) in [Split::Train, Split::Val, Split::Test].into_iter().zip(sizes) {
            prop_assert_eq!(m.entries.iter().filter(|e| e.split == split).count(), size);
            prop_assert!(size >= 1);
        }
        let again = common::phantom_dataset(seed, count, 16, s);
        prop_assert_eq!(&again.manifest, m);
        for p in &ds.pairs {
            prop_assert!(p.input.same_shape(&p.target));
            prop_assert_eq!(decimate(&p.input, s).unwrap(), decimate(&p.target, s).unwrap());
        }
    }
}
