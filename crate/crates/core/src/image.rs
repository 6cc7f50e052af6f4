//! Image and sampling model: the lateral-line by axial-depth grid and the
//! beamline decimation that simulates a reduced-line acquisition.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest line or depth count accepted at pipeline entry points.
pub const MIN_PIPELINE_DIM: usize = 4;

/// Grayscale ultrasound frame. Row `l` holds the `depth` samples of beamline `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct UsImage {
    lines: usize,
    depth: usize,
    pixels: Vec<f64>,
}

impl UsImage {
    /// Builds an image, checking buffer length and that every value is a
    /// finite intensity in `[0, 1]`.
    pub fn new(lines: usize, depth: usize, pixels: Vec<f64>) -> Result<Self> {
        if lines == 0 || depth == 0 {
            return Err(Error::InvalidImage(format!(
                "empty geometry {lines}x{depth}"
            )));
        }
        let expected = lines
            .checked_mul(depth)
            .ok_or_else(|| Error::InvalidImage(format!("dimension overflow {lines}x{depth}")))?;
        if pixels.len() != expected {
            return Err(Error::InvalidImage(format!(
                "buffer holds {} values, geometry {lines}x{depth} needs {expected}",
                pixels.len()
            )));
        }
        if let Some((i, v)) = pixels
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidImage(format!(
                "pixel {i} = {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            lines,
            depth,
            pixels,
        })
    }

    /// Builds an image after clamping every value into `[0, 1]`. NaN is rejected.
    pub fn from_clamped(lines: usize, depth: usize, mut pixels: Vec<f64>) -> Result<Self> {
        if pixels.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("NaN pixel".into()));
        }
        for v in &mut pixels {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(lines, depth, pixels)
    }

    pub fn filled(lines: usize, depth: usize, value: f64) -> Result<Self> {
        Self::new(lines, depth, vec![value; lines * depth])
    }

    pub fn from_fn(lines: usize, depth: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut pixels = Vec::with_capacity(lines * depth);
        for l in 0..lines {
            for d in 0..depth {
                pixels.push(f(l, d));
            }
        }
        Self::new(lines, depth, pixels)
    }

    pub fn lines(&self) -> usize {
        self.lines
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, line: usize, depth: usize) -> f64 {
        self.pixels[line * self.depth + depth]
    }

    /// The `depth` samples of one beamline.
    pub fn line(&self, line: usize) -> &[f64] {
        &self.pixels[line * self.depth..(line + 1) * self.depth]
    }

    pub fn same_shape(&self, other: &UsImage) -> bool {
        self.lines == other.lines && self.depth == other.depth
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        crate::parallel::pairwise_sum(&self.pixels) / self.pixels.len() as f64
    }

    /// Rejects images below the 4x4 kernel-support minimum.
    pub fn check_pipeline_dims(&self) -> Result<()> {
        if self.lines < MIN_PIPELINE_DIM || self.depth < MIN_PIPELINE_DIM {
            return Err(Error::InvalidImage(format!(
                "{}x{} is below the {MIN_PIPELINE_DIM}x{MIN_PIPELINE_DIM} minimum",
                self.lines, self.depth
            )));
        }
        Ok(())
    }

    pub(crate) fn ensure_same_shape(&self, other: &UsImage) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::IncomparableImages {
                a_lines: self.lines,
                a_depth: self.depth,
                b_lines: other.lines,
                b_depth: other.depth,
            })
        }
    }
}

/// Lateral decimation factor. `X2` keeps every 2nd beamline, `X4` every 4th.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SamplingScheme {
    #[serde(rename = "2X")]
    X2,
    #[serde(rename = "4X")]
    X4,
}

impl SamplingScheme {
    pub fn stride(self) -> usize {
        match self {
            SamplingScheme::X2 => 2,
            SamplingScheme::X4 => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SamplingScheme::X2 => "2X",
            SamplingScheme::X4 => "4X",
        }
    }

    pub fn from_stride(stride: usize) -> Result<Self> {
        match stride {
            2 => Ok(SamplingScheme::X2),
            4 => Ok(SamplingScheme::X4),
            s => Err(Error::InvalidParameter(format!(
                "unsupported stride {s}, expected 2 or 4"
            ))),
        }
    }

    /// Square kernel size that spans at least two acquired lines.
    pub fn kernel_size(self) -> usize {
        match self {
            SamplingScheme::X2 => 3,
            SamplingScheme::X4 => 5,
        }
    }

    /// Whether line `l` is one the probe acquired.
    #[inline]
    pub fn is_acquired(self, line: usize) -> bool {
        line.is_multiple_of(self.stride())
    }

    /// Line count after decimating `lines`, i.e. `ceil(lines / s)`.
    pub fn low_res_lines(self, lines: usize) -> usize {
        lines.div_ceil(self.stride())
    }

    pub fn min_lines(self) -> usize {
        2 * self.stride()
    }

    pub(crate) fn check_lines(self, lines: usize) -> Result<()> {
        if lines < self.min_lines() {
            return Err(Error::ImageTooNarrow {
                lines,
                stride: self.stride(),
                needed: self.min_lines(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for SamplingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SamplingScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2x" | "2" => Ok(SamplingScheme::X2),
            "4x" | "4" => Ok(SamplingScheme::X4),
            other => Err(Error::InvalidParameter(format!(
                "unknown scheme {other:?}, expected 2x or 4x"
            ))),
        }
    }
}

/// Per-line acquisition flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LineMask {
    acquired: Vec<bool>,
}

impl LineMask {
    pub fn acquired(&self) -> &[bool] {
        &self.acquired
    }

    pub fn len(&self) -> usize {
        self.acquired.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acquired.is_empty()
    }

    pub fn acquired_indices(&self) -> Vec<usize> {
        self.acquired
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| a.then_some(i))
            .collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        self.acquired
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (!a).then_some(i))
            .collect()
    }
}

/// Requires at least two acquired lines, i.e. `lines > s`.
pub fn line_mask(lines: usize, scheme: SamplingScheme) -> Result<LineMask> {
    if lines <= scheme.stride() {
        return Err(Error::ImageTooNarrow {
            lines,
            stride: scheme.stride(),
            needed: scheme.stride() + 1,
        });
    }
    Ok(LineMask {
        acquired: (0..lines).map(|l| scheme.is_acquired(l)).collect(),
    })
}

/// Keeps lines `0, s, 2s, ...`; the result has `ceil(L/s)` lines and the same depth.
pub fn decimate(img: &UsImage, scheme: SamplingScheme) -> Result<UsImage> {
    scheme.check_lines(img.lines)?;
    let s = scheme.stride();
    let kept = scheme.low_res_lines(img.lines);
    let mut pixels = Vec::with_capacity(kept * img.depth);
    for k in 0..kept {
        pixels.extend_from_slice(img.line(k * s));
    }
    Ok(UsImage {
        lines: kept,
        depth: img.depth,
        pixels,
    })
}
