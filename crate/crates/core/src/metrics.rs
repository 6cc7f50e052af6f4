//! Full-reference quality metrics between a target image `A` and an estimate `B`.
//!
//! SSIM here is the global form: means, standard deviations and covariance are
//! taken over the whole image rather than a sliding window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::UsImage;
use crate::parallel::{pairwise_sum, pairwise_sum_by};

/// Histogram bin width: five grey levels on the 8-bit scale.
pub const DEFAULT_BIN_WIDTH: f64 = 5.0 / 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl SsimConstants {
    pub fn new(c1: f64, c2: f64, c3: f64) -> Result<Self> {
        if [c1, c2, c3].iter().any(|c| !(*c > 0.0) || !c.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "SSIM constants must be positive, got ({c1}, {c2}, {c3})"
            )));
        }
        Ok(Self { c1, c2, c3 })
    }
}

impl Default for SsimConstants {
    fn default() -> Self {
        let c2 = 0.03f64 * 0.03;
        Self {
            c1: 0.01 * 0.01,
            c2,
            c3: c2 / 2.0,
        }
    }
}

pub fn mse(a: &UsImage, b: &UsImage) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (pa, pb) = (a.pixels(), b.pixels());
    let s = pairwise_sum_by(pa.len(), &|i| {
        let d = pa[i] - pb[i];
        d * d
    });
    Ok(s / pa.len() as f64)
}

/// `10 log10(max(A)^2 / MSE)`. Identical images give `+inf`; an all-zero
/// target with any error gives `-inf`.
pub fn psnr(target: &UsImage, estimate: &UsImage) -> Result<f64> {
    let err = mse(target, estimate)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = target.max();
    if peak == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

pub fn mae(a: &UsImage, b: &UsImage) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (pa, pb) = (a.pixels(), b.pixels());
    Ok(pairwise_sum_by(pa.len(), &|i| (pa[i] - pb[i]).abs()) / pa.len() as f64)
}

pub fn ssim(a: &UsImage, b: &UsImage, c: &SsimConstants) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if a.len() < 2 {
        return Err(Error::InvalidImage("SSIM needs at least 2 pixels".into()));
    }
    let (pa, pb) = (a.pixels(), b.pixels());
    let n = pa.len() as f64;
    let mu_a = pairwise_sum(pa) / n;
    let mu_b = pairwise_sum(pb) / n;
    let cov = |x: &[f64], mx: f64, y: &[f64], my: f64| {
        pairwise_sum_by(x.len(), &|i| (x[i] - mx) * (y[i] - my)) / n
    };
    let var_a = cov(pa, mu_a, pa, mu_a);
    let var_b = cov(pb, mu_b, pb, mu_b);
    let cov_ab = cov(pa, mu_a, pb, mu_b);
    // sqrt(v*v) == v in IEEE arithmetic, so ssim(A, A) evaluates to exactly 1.
    let sd_ab = (var_a * var_b).sqrt();

    let luminance = (2.0 * mu_a * mu_b + c.c1) / (mu_a * mu_a + mu_b * mu_b + c.c1);
    let contrast = (2.0 * sd_ab + c.c2) / (var_a + var_b + c.c2);
    let structure = (cov_ab + c.c3) / (sd_ab + c.c3);
    Ok(luminance * contrast * structure)
}

/// Pointwise `|A - B|` plus its maximum on both intensity scales.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorImage {
    pub grid: UsImage,
    pub max: f64,
    pub max_255: f64,
}

pub fn abs_error_image(a: &UsImage, b: &UsImage) -> Result<ErrorImage> {
    a.ensure_same_shape(b)?;
    let diff: Vec<f64> = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (x - y).abs())
        .collect();
    let max = diff.iter().copied().fold(0.0, f64::max);
    Ok(ErrorImage {
        grid: UsImage::new(a.lines(), a.depth(), diff)?,
        max,
        max_255: max * 255.0,
    })
}

/// Errors this close below a bin edge (in bin units) count as on it, so that
/// differences of 8-bit levels such as `(137 - 132) / 255` land in the bin their
/// integer difference names despite rounding.
const BIN_EDGE_SNAP: f64 = 1e-9;

/// Counts of `|A - B|` in bins `[k w, (k+1) w)`; the last bin is closed at 1.
pub fn error_histogram(a: &UsImage, b: &UsImage, bin_width: f64) -> Result<Vec<u64>> {
    a.ensure_same_shape(b)?;
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    let bins = histogram_bins(bin_width);
    let mut counts = vec![0u64; bins];
    for (x, y) in a.pixels().iter().zip(b.pixels()) {
        let e = (x - y).abs();
        let k = (((e / bin_width) + BIN_EDGE_SNAP).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(counts)
}

pub fn histogram_bins(bin_width: f64) -> usize {
    ((1.0 / bin_width).ceil() as usize).max(1)
}

/// Share of pixels in the first histogram bin.
pub fn first_bin_fraction(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts[0] as f64 / total as f64
}

/// Per-image metric set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub histogram: Vec<u64>,
}

impl MetricReport {
    pub fn compute(target: &UsImage, estimate: &UsImage) -> Result<Self> {
        Ok(Self {
            psnr: psnr(target, estimate)?,
            ssim: ssim(target, estimate, &SsimConstants::default())?,
            mae: mae(target, estimate)?,
            histogram: error_histogram(target, estimate, DEFAULT_BIN_WIDTH)?,
        })
    }

    pub fn first_bin_fraction(&self) -> f64 {
        first_bin_fraction(&self.histogram)
    }
}

/// Box-plot summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

/// Quantile by linear interpolation between closest ranks (position `p (n-1)`).
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi || frac == 0.0 || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::Empty("box statistics of an empty list".into()));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN in box statistics input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let median = quantile(&sorted, 0.5);
    let q3 = quantile(&sorted, 0.75);
    let iqr = q3 - q1;
    let (lo_fence, hi_fence) = if iqr.is_finite() {
        (q1 - 1.5 * iqr, q3 + 1.5 * iqr)
    } else {
        (f64::NEG_INFINITY, f64::INFINITY)
    };
    let whisker_low = sorted
        .iter()
        .copied()
        .find(|&v| v >= lo_fence)
        .unwrap_or(q1)
        .min(q1);
    let whisker_high = sorted
        .iter()
        .rev()
        .copied()
        .find(|&v| v <= hi_fence)
        .unwrap_or(q3)
        .max(q3);
    let all_equal = sorted[0] == sorted[sorted.len() - 1];
    let mean = if all_equal {
        sorted[0]
    } else {
        pairwise_sum(values) / values.len() as f64
    };
    Ok(BoxStats {
        n: values.len(),
        mean,
        median,
        q1,
        q3,
        whisker_low,
        whisker_high,
    })
}
