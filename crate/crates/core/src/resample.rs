//! Lateral reconstruction of the missing beamlines.
//!
//! Each missing line is a fixed linear combination of acquired lines, so the
//! weights are planned once per output line and then applied to whole depth
//! rows. Interpolation never mixes depth samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{SamplingScheme, UsImage};
use crate::parallel;

/// Free parameter of the cubic-convolution kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub a: f64,
}

impl KernelParams {
    pub fn new(a: f64) -> Result<Self> {
        if !(a < 0.0) || !a.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "cubic kernel parameter must be negative, got {a}"
            )));
        }
        Ok(Self { a })
    }
}

impl Default for KernelParams {
    fn default() -> Self {
        Self { a: -0.5 }
    }
}

/// Piecewise-cubic interpolation kernel with support `(-2, 2)`.
#[inline]
pub fn keys_kernel(x: f64, params: &KernelParams) -> f64 {
    let a = params.a;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// The up-samplers available to the comparison harness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Upsampler {
    Cubic(KernelParams),
    Nearest,
    Linear,
}

impl Default for Upsampler {
    fn default() -> Self {
        Upsampler::Cubic(KernelParams::default())
    }
}

impl Upsampler {
    pub fn name(&self) -> &'static str {
        match self {
            Upsampler::Cubic(_) => "cubic",
            Upsampler::Nearest => "nearest",
            Upsampler::Linear => "linear",
        }
    }

    pub fn all() -> [Upsampler; 3] {
        [Upsampler::default(), Upsampler::Nearest, Upsampler::Linear]
    }

    pub fn upsample(
        &self,
        low: &UsImage,
        scheme: SamplingScheme,
        target_lines: usize,
    ) -> Result<UsImage> {
        check_geometry(low, scheme, target_lines)?;
        let plan = plan_lines(self, low.lines(), scheme.stride(), target_lines);
        Ok(apply_plan(low, &plan))
    }
}

pub fn upsample_cubic(
    low: &UsImage,
    scheme: SamplingScheme,
    target_lines: usize,
) -> Result<UsImage> {
    Upsampler::default().upsample(low, scheme, target_lines)
}

pub fn upsample_cubic_with(
    low: &UsImage,
    scheme: SamplingScheme,
    target_lines: usize,
    params: KernelParams,
) -> Result<UsImage> {
    Upsampler::Cubic(params).upsample(low, scheme, target_lines)
}

pub fn upsample_nearest(
    low: &UsImage,
    scheme: SamplingScheme,
    target_lines: usize,
) -> Result<UsImage> {
    Upsampler::Nearest.upsample(low, scheme, target_lines)
}

pub fn upsample_linear(
    low: &UsImage,
    scheme: SamplingScheme,
    target_lines: usize,
) -> Result<UsImage> {
    Upsampler::Linear.upsample(low, scheme, target_lines)
}

fn check_geometry(low: &UsImage, scheme: SamplingScheme, target_lines: usize) -> Result<()> {
    scheme.check_lines(target_lines)?;
    let expected = scheme.low_res_lines(target_lines);
    if low.lines() != expected {
        return Err(Error::InconsistentGeometry(format!(
            "{} low-resolution lines cannot expand to {target_lines} at stride {} (expected {expected})",
            low.lines(),
            scheme.stride()
        )));
    }
    Ok(())
}

/// How one output line is formed from the low-resolution lines.
#[derive(Debug, Clone, PartialEq)]
enum LinePlan {
    Copy(usize),
    Blend(Vec<(usize, f64)>),
}

/// Extrapolation order used for virtual samples beyond either edge.
#[derive(Clone, Copy)]
enum Extrapolation {
    /// Third difference vanishes: f(-1) = 3f(0) - 3f(1) + f(2).
    Quadratic,
    /// Second difference vanishes: f(-1) = 2f(0) - f(1).
    Linear,
}

/// Expresses sample `idx` (possibly outside `0..n`) as weights on real samples.
fn push_sample(idx: isize, n: usize, scale: f64, rule: Extrapolation, out: &mut Vec<(usize, f64)>) {
    if idx >= 0 && (idx as usize) < n {
        out.push((idx as usize, scale));
        return;
    }
    let dir: isize = if idx < 0 { 1 } else { -1 };
    let rule = match rule {
        Extrapolation::Quadratic if n >= 3 => Extrapolation::Quadratic,
        _ => Extrapolation::Linear,
    };
    match rule {
        Extrapolation::Quadratic => {
            push_sample(idx + dir, n, 3.0 * scale, rule, out);
            push_sample(idx + 2 * dir, n, -3.0 * scale, rule, out);
            push_sample(idx + 3 * dir, n, scale, rule, out);
        }
        Extrapolation::Linear => {
            push_sample(idx + dir, n, 2.0 * scale, rule, out);
            push_sample(idx + 2 * dir, n, -scale, rule, out);
        }
    }
}

fn merge(mut terms: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    terms.sort_by_key(|t| t.0);
    let mut merged: Vec<(usize, f64)> = Vec::with_capacity(terms.len());
    for (i, w) in terms {
        match merged.last_mut() {
            Some(last) if last.0 == i => last.1 += w,
            _ => merged.push((i, w)),
        }
    }
    merged.retain(|t| t.1 != 0.0);
    merged
}

fn plan_lines(method: &Upsampler, n: usize, stride: usize, target_lines: usize) -> Vec<LinePlan> {
    (0..target_lines)
        .map(|l| {
            let j = l / stride;
            let rem = l % stride;
            if rem == 0 {
                return LinePlan::Copy(j);
            }
            let t = rem as f64 / stride as f64;
            let j = j as isize;
            let mut terms = Vec::with_capacity(8);
            match method {
                Upsampler::Cubic(p) => {
                    let taps = [
                        (j - 1, keys_kernel(t + 1.0, p)),
                        (j, keys_kernel(t, p)),
                        (j + 1, keys_kernel(1.0 - t, p)),
                        (j + 2, keys_kernel(2.0 - t, p)),
                    ];
                    for (idx, w) in taps {
                        push_sample(idx, n, w, Extrapolation::Quadratic, &mut terms);
                    }
                }
                Upsampler::Linear => {
                    push_sample(j, n, 1.0 - t, Extrapolation::Linear, &mut terms);
                    push_sample(j + 1, n, t, Extrapolation::Linear, &mut terms);
                }
                Upsampler::Nearest => {
                    let right = j as usize + 1;
                    let pick = if t <= 0.5 || right >= n {
                        j as usize
                    } else {
                        right
                    };
                    return LinePlan::Copy(pick);
                }
            }
            LinePlan::Blend(merge(terms))
        })
        .collect()
}

fn apply_plan(low: &UsImage, plan: &[LinePlan]) -> UsImage {
    let depth = low.depth();
    let mut out = vec![0.0; plan.len() * depth];
    parallel::for_each_chunk_mut(&mut out, depth, |l, row| match &plan[l] {
        LinePlan::Copy(j) => row.copy_from_slice(low.line(*j)),
        LinePlan::Blend(terms) => {
            for &(j, w) in terms {
                for (o, &v) in row.iter_mut().zip(low.line(j)) {
                    *o += w * v;
                }
            }
            for o in row.iter_mut() {
                *o = o.clamp(0.0, 1.0);
            }
        }
    });
    UsImage::new(plan.len(), depth, out).expect("planned geometry is valid")
}
