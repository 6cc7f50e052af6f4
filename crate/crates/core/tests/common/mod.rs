//! Helpers shared by the integration tests: seeded generators, brute-force
//! metric oracles written straight from the definitions, and central
//! finite differences.
#![allow(dead_code)]

use beamsr::dataio::{
    build_dataset, generate_phantoms, BuildOptions, Dataset, NamedImage, PhantomParams, SplitRatios,
};
use beamsr::model::ResBlock;
use beamsr::netmath::{
    conv2d_backward, conv2d_forward, relu_backward, relu_forward, ConvParams, Tensor,
};
use beamsr::train::{masked_log_loss, LossParams};
use beamsr::{ModelConfig, SamplingScheme, SrModel, UsImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut impl Rng, lines: usize, depth: usize) -> UsImage {
    let px = (0..lines * depth)
        .map(|_| rng.random_range(0.0..=1.0))
        .collect();
    UsImage::new(lines, depth, px).unwrap()
}

pub fn random_tensor(rng: &mut impl Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn phantom_dataset(seed: u64, count: usize, size: usize, scheme: SamplingScheme) -> Dataset {
    let p = PhantomParams {
        seed,
        count,
        lines: size,
        depth: size,
        ..PhantomParams::default()
    };
    let named: Vec<NamedImage> = generate_phantoms(&p)
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, image)| NamedImage {
            name: format!("phantom_{i:06}"),
            image,
        })
        .collect();
    let opts = BuildOptions {
        district: "phantom".into(),
        scheme,
        ratios: SplitRatios::default(),
        seed: seed.wrapping_add(1),
    };
    build_dataset(&named, &opts).unwrap()
}

// ---- metric oracles: plain loops, no shared code with the library ----

pub fn oracle_mse(a: &UsImage, b: &UsImage) -> f64 {
    let mut s = 0.0;
    for l in 0..a.lines() {
        for d in 0..a.depth() {
            let e = a.get(l, d) - b.get(l, d);
            s += e * e;
        }
    }
    s / (a.lines() * a.depth()) as f64
}

pub fn oracle_mae(a: &UsImage, b: &UsImage) -> f64 {
    let mut s = 0.0;
    for l in 0..a.lines() {
        for d in 0..a.depth() {
            s += (a.get(l, d) - b.get(l, d)).abs();
        }
    }
    s / (a.lines() * a.depth()) as f64
}

pub fn oracle_psnr(target: &UsImage, est: &UsImage) -> f64 {
    let mut peak: f64 = 0.0;
    for l in 0..target.lines() {
        for d in 0..target.depth() {
            peak = peak.max(target.get(l, d));
        }
    }
    let m = oracle_mse(target, est);
    if m == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (peak * peak / m).log10()
}

/// The two-factor closed form, which equals the three-factor product when
/// `c3 = c2 / 2`.
pub fn oracle_ssim(a: &UsImage, b: &UsImage) -> f64 {
    let (c1, c2) = (1e-4, 9e-4);
    let n = (a.lines() * a.depth()) as f64;
    let (mut sa, mut sb) = (0.0, 0.0);
    for l in 0..a.lines() {
        for d in 0..a.depth() {
            sa += a.get(l, d);
            sb += b.get(l, d);
        }
    }
    let (ma, mb) = (sa / n, sb / n);
    let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
    for l in 0..a.lines() {
        for d in 0..a.depth() {
            let (x, y) = (a.get(l, d) - ma, b.get(l, d) - mb);
            va += x * x;
            vb += y * y;
            cab += x * y;
        }
    }
    let (va, vb, cab) = (va / n, vb / n, cab / n);
    ((2.0 * ma * mb + c1) * (2.0 * cab + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// 51 bins of width 5/255; bin k holds errors in [5k, 5k+5) on the 0-255 scale,
/// the last bin also takes the value 255.
pub fn oracle_histogram(a: &UsImage, b: &UsImage) -> Vec<u64> {
    let mut h = vec![0u64; 51];
    for l in 0..a.lines() {
        for d in 0..a.depth() {
            let e = (a.get(l, d) - b.get(l, d)).abs();
            let mut k = 0;
            while k < 50 && e >= (k + 1) as f64 * 5.0 / 255.0 {
                k += 1;
            }
            h[k] += 1;
        }
    }
    h
}

// ---- finite differences ----

pub const FD_STEP: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|)`, with the denominator floored at `floor` so
/// that two near-zero values compare absolutely.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` along coordinate `i` of `x`.
pub fn central_diff(x: &mut [f64], i: usize, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + FD_STEP;
    let up = f(x);
    x[i] = orig - FD_STEP;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * FD_STEP)
}

/// `sum(w * y)`: a random linear read-out turning a tensor into a scalar loss.
pub fn readout(y: &Tensor, w: &Tensor) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Largest [`rel_err`] between `analytic` and central differences of `f` over
/// every coordinate of `x`.
pub fn max_rel_err(analytic: &[f64], x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    assert_eq!(analytic.len(), x.len());
    (0..x.len())
        .map(|i| rel_err(analytic[i], central_diff(x, i, &mut f), 1e-6))
        .fold(0.0, f64::max)
}

fn flat(slices: &[&[f64]]) -> Vec<f64> {
    slices.iter().flat_map(|s| s.iter().copied()).collect()
}

fn unflat(dst: Vec<&mut [f64]>, src: &[f64]) {
    let mut at = 0;
    for s in dst {
        s.copy_from_slice(&src[at..at + s.len()]);
        at += s.len();
    }
}

fn random_conv(rng: &mut ChaCha8Rng, out_ch: usize, in_ch: usize, k: usize) -> ConvParams {
    let v = (0..out_ch * in_ch * k * k)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let g = (0..out_ch).map(|_| rng.random_range(0.5..1.5)).collect();
    let b = (0..out_ch).map(|_| rng.random_range(-0.2..0.2)).collect();
    ConvParams::new(out_ch, in_ch, k, v, g, b).unwrap()
}

/// Weight-normalized convolution under a random linear read-out; checks
/// direction, gain, bias and input gradients.
pub fn grad_conv(seed: u64) -> f64 {
    let mut r = rng(seed);
    let k = if seed.is_multiple_of(2) { 3 } else { 5 };
    let p = random_conv(&mut r, 3, 2, k);
    let x = random_tensor(&mut r, [2, 2, 5, 6], -1.0, 1.0);
    let w = random_tensor(&mut r, [2, 3, 5, 6], -1.0, 1.0);
    let up = w.clone();
    let (g, dx) = conv2d_backward(&x, &p, &up).unwrap();

    let mut theta = flat(&p.slices());
    let e1 = max_rel_err(&flat(&g.slices()), &mut theta, |t| {
        let mut q = p.clone();
        unflat(q.slices_mut().into(), t);
        readout(&conv2d_forward(&x, &q).unwrap(), &w)
    });
    let mut xs = x.data().to_vec();
    let e2 = max_rel_err(dx.data(), &mut xs, |t| {
        let xt = Tensor::new(x.shape(), t.to_vec()).unwrap();
        readout(&conv2d_forward(&xt, &p).unwrap(), &w)
    });
    e1.max(e2)
}

/// ReLU away from its kink.
pub fn grad_relu(seed: u64) -> f64 {
    let mut r = rng(seed);
    let data = (0..2 * 3 * 4 * 5)
        .map(|_| {
            let m = r.random_range(0.05..1.0);
            if r.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Tensor::new([2, 3, 4, 5], data).unwrap();
    let w = random_tensor(&mut r, [2, 3, 4, 5], -1.0, 1.0);
    let dx = relu_backward(&x, &w).unwrap();
    let mut xs = x.data().to_vec();
    max_rel_err(dx.data(), &mut xs, |t| {
        readout(
            &relu_forward(&Tensor::new(x.shape(), t.to_vec()).unwrap()),
            &w,
        )
    })
}

/// One wide-activation residual block.
pub fn grad_block(seed: u64) -> f64 {
    let mut r = rng(seed);
    let block = ResBlock {
        expand: random_conv(&mut r, 6, 2, 3),
        project: random_conv(&mut r, 2, 6, 3),
    };
    let u = random_tensor(&mut r, [2, 2, 6, 5], -1.0, 1.0);
    let w = random_tensor(&mut r, [2, 2, 6, 5], -1.0, 1.0);
    let (_, cache) = block.forward(&u).unwrap();
    let ((ge, gp), du) = block.backward(&cache, &w).unwrap();

    let mut analytic = flat(&ge.slices());
    analytic.extend(flat(&gp.slices()));
    let mut theta = flat(&block.expand.slices());
    theta.extend(flat(&block.project.slices()));
    let e1 = max_rel_err(&analytic, &mut theta, |t| {
        let mut b = block.clone();
        let mut dst: Vec<&mut [f64]> = b.expand.slices_mut().into();
        dst.extend(b.project.slices_mut());
        unflat(dst, t);
        readout(&b.forward(&u).unwrap().0, &w)
    });
    let mut us = u.data().to_vec();
    let e2 = max_rel_err(du.data(), &mut us, |t| {
        readout(
            &block
                .forward(&Tensor::new(u.shape(), t.to_vec()).unwrap())
                .unwrap()
                .0,
            &w,
        )
    });
    e1.max(e2)
}

pub fn tiny_model(seed: u64, scheme: SamplingScheme) -> SrModel {
    let cfg = ModelConfig {
        blocks: 1,
        width: 2,
        expansion: 2,
        norm_mean: 0.4,
        ..ModelConfig::for_scheme(scheme)
    };
    let mut m = SrModel::init(cfg, seed).unwrap();
    // full-size gains so every path carries a visible gradient
    let mut r = rng(seed ^ 0x5eed);
    for s in m.param_slices_mut() {
        s.iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3));
    }
    m
}

/// Full tiny model through the masked log loss; checks every parameter and the input.
pub fn grad_model(seed: u64) -> f64 {
    let scheme = if seed.is_multiple_of(2) {
        SamplingScheme::X2
    } else {
        SamplingScheme::X4
    };
    let model = tiny_model(seed, scheme);
    let mut r = rng(seed.wrapping_add(99));
    let x = random_tensor(&mut r, [2, 1, 8, 8], 0.0, 1.0);
    let y = random_tensor(&mut r, [2, 1, 8, 8], 0.0, 1.0);
    let lp = LossParams::new(scheme);
    let loss =
        |m: &SrModel, x: &Tensor| masked_log_loss(&m.forward(x).unwrap(), &y, &lp).unwrap().0;

    let (pred, cache) = model.forward_cached(&x).unwrap();
    let (_, dl) = masked_log_loss(&pred, &y, &lp).unwrap();
    let (g, dx) = model.backward(&cache, &dl).unwrap();

    let mut theta = flat(&model.param_slices());
    let e1 = max_rel_err(&flat(&g.slices()), &mut theta, |t| {
        let mut m = model.clone();
        unflat(m.param_slices_mut(), t);
        loss(&m, &x)
    });
    let mut xs = x.data().to_vec();
    let e2 = max_rel_err(dx.data(), &mut xs, |t| {
        loss(&model, &Tensor::new(x.shape(), t.to_vec()).unwrap())
    });
    e1.max(e2)
}

/// Masked log loss alone. Pixels within 1e-2 of a tie are skipped, where the
/// loss has its cusp.
pub fn grad_loss(seed: u64) -> f64 {
    let scheme = if seed.is_multiple_of(2) {
        SamplingScheme::X2
    } else {
        SamplingScheme::X4
    };
    let mut r = rng(seed);
    let pred = random_tensor(&mut r, [2, 1, 9, 7], 0.0, 1.0);
    let target = random_tensor(&mut r, [2, 1, 9, 7], 0.0, 1.0);
    let lp = LossParams::new(scheme);
    let (_, g) = masked_log_loss(&pred, &target, &lp).unwrap();
    let mut p = pred.data().to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..p.len() {
        if (p[i] - target.data()[i]).abs() <= 1e-2 {
            continue;
        }
        let n = central_diff(&mut p, i, &mut |t: &[f64]| {
            masked_log_loss(
                &Tensor::new(pred.shape(), t.to_vec()).unwrap(),
                &target,
                &lp,
            )
            .unwrap()
            .0
        });
        worst = worst.max(rel_err(g.data()[i], n, 1e-6));
    }
    worst
}
