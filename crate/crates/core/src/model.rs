//! Residual refinement network with wide activation.
//!
//! ```text
//! xn = x - norm_mean
//! u  = head(xn)
//! u  = u + project(relu(expand(u)))        repeated `blocks` times
//! y  = tail(u) + skip(xn) + norm_mean
//! ```
//!
//! Every convolution is weight-normalized and "same" padded, so the output
//! has the input's `batch x 1 x L x D` shape. The network refines an
//! already interpolated image; it never changes the line count.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{SamplingScheme, UsImage};
use crate::netmath::{
    conv2d_backward, conv2d_forward, relu_backward, relu_forward, ConvGrads, ConvParams, Tensor,
};

/// Gain multiplier applied to each block's projection at init.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

/// Gain multiplier of the tail at init. The tail output is added straight to
/// the interpolated input, so it starts small enough that the initial
/// prediction is within a fraction of a grey level of that input.
pub const TAIL_INIT_SCALE: f64 = 1e-3;

const MAGIC: &[u8; 4] = b"USRM";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 * 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub blocks: usize,
    /// Channels carried between blocks.
    pub width: usize,
    /// Width multiplier of the pre-activation layer inside each block.
    pub expansion: usize,
    pub kernel: usize,
    /// Scalar subtracted at entry and added back at exit.
    pub norm_mean: f64,
}

impl ModelConfig {
    /// Eight blocks, ten channels, expansion four, kernel matched to the scheme.
    pub fn for_scheme(scheme: SamplingScheme) -> Self {
        Self {
            blocks: 8,
            width: 10,
            expansion: 4,
            kernel: scheme.kernel_size(),
            norm_mean: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel.is_multiple_of(2) || self.kernel == 0 {
            return Err(Error::InvalidParameter(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.blocks == 0 || self.width == 0 || self.expansion == 0 {
            return Err(Error::InvalidParameter(format!(
                "blocks, width and expansion must be positive: {self:?}"
            )));
        }
        if !self.norm_mean.is_finite() {
            return Err(Error::InvalidParameter("norm_mean must be finite".into()));
        }
        Ok(())
    }

    pub fn wide_channels(&self) -> usize {
        self.width * self.expansion
    }

    /// Head, two per block, tail, and the input skip.
    pub fn conv_layer_count(&self) -> usize {
        2 * self.blocks + 3
    }

    /// The scheme whose kernel rule this config follows, if any.
    pub fn scheme(&self) -> Option<SamplingScheme> {
        [SamplingScheme::X2, SamplingScheme::X4]
            .into_iter()
            .find(|s| s.kernel_size() == self.kernel)
    }

    pub fn check_scheme(&self, scheme: SamplingScheme) -> Result<()> {
        if self.kernel != scheme.kernel_size() {
            return Err(Error::SchemeMismatch {
                kernel: self.kernel,
                scheme: scheme.label().to_string(),
            });
        }
        Ok(())
    }

    /// Trainable scalar count, each convolution contributing direction, gain and bias.
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let conv = |o: usize, i: usize| o * i * k2 + 2 * o;
        let (w, we) = (self.width, self.wide_channels());
        conv(w, 1) + self.blocks * (conv(we, w) + conv(w, we)) + conv(1, w) + conv(1, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub expand: ConvParams,
    pub project: ConvParams,
}

/// Activations of one block kept for its backward pass.
#[derive(Debug)]
pub struct BlockCache {
    input: Tensor,
    pre_activation: Tensor,
    activation: Tensor,
}

impl ResBlock {
    /// `u + project(relu(expand(u)))`.
    pub fn forward(&self, u: &Tensor) -> Result<(Tensor, BlockCache)> {
        let a = conv2d_forward(u, &self.expand).map_err(divergence)?;
        let r = relu_forward(&a);
        let mut out = conv2d_forward(&r, &self.project).map_err(divergence)?;
        out.add_assign(u)?;
        Ok((
            out,
            BlockCache {
                input: u.clone(),
                pre_activation: a,
                activation: r,
            },
        ))
    }

    /// Returns `(expand, project)` gradients and dLoss/du.
    pub fn backward(
        &self,
        cache: &BlockCache,
        upstream: &Tensor,
    ) -> Result<((ConvGrads, ConvGrads), Tensor)> {
        let (gp, dr) = conv2d_backward(&cache.activation, &self.project, upstream)?;
        let da = relu_backward(&cache.pre_activation, &dr)?;
        let (ge, mut du) = conv2d_backward(&cache.input, &self.expand, &da)?;
        du.add_assign(upstream)?;
        Ok(((ge, gp), du))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrModel {
    config: ModelConfig,
    pub head: ConvParams,
    pub blocks: Vec<ResBlock>,
    pub tail: ConvParams,
    pub skip: ConvParams,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    normalized: Tensor,
    blocks: Vec<BlockCache>,
    body_out: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub head: ConvGrads,
    pub blocks: Vec<(ConvGrads, ConvGrads)>,
    pub tail: ConvGrads,
    pub skip: ConvGrads,
}

impl ModelGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        out.extend(self.head.slices());
        for (e, p) in &self.blocks {
            out.extend(e.slices());
            out.extend(p.slices());
        }
        out.extend(self.tail.slices());
        out.extend(self.skip.slices());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        out.extend(self.head.slices_mut());
        for (e, p) in &mut self.blocks {
            out.extend(e.slices_mut());
            out.extend(p.slices_mut());
        }
        out.extend(self.tail.slices_mut());
        out.extend(self.skip.slices_mut());
        out
    }

    /// `self += weight * other`.
    pub fn add_scaled(&mut self, other: &ModelGrads, weight: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += weight * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            s.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

fn divergence(e: Error) -> Error {
    match e {
        Error::NonFinite(what) => Error::NumericalDivergence(what),
        other => other,
    }
}

impl SrModel {
    /// Deterministic He-style initialization. The skip path starts as an exact
    /// identity and the residual branches start small, so the untrained
    /// network returns roughly its input.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, w, we) = (config.kernel, config.width, config.wide_channels());
        let head = ConvParams::he_init(w, 1, k, 1.0, &mut rng)?;
        let blocks = (0..config.blocks)
            .map(|_| {
                Ok(ResBlock {
                    expand: ConvParams::he_init(we, w, k, 1.0, &mut rng)?,
                    project: ConvParams::he_init(w, we, k, RESIDUAL_INIT_SCALE, &mut rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let tail = ConvParams::he_init(1, w, k, TAIL_INIT_SCALE, &mut rng)?;
        let skip = ConvParams::identity(k)?;
        Ok(Self {
            config,
            head,
            blocks,
            tail,
            skip,
        })
    }

    /// Same shapes as [`SrModel::init`] but with a zero-gain tail, so the
    /// output equals the input up to the mean subtract/add round trip.
    pub fn identity(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::init(config, seed)?;
        m.tail.g.iter_mut().for_each(|g| *g = 0.0);
        m.tail.bias.iter_mut().for_each(|b| *b = 0.0);
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn set_norm_mean(&mut self, mean: f64) {
        self.config.norm_mean = mean;
    }

    pub fn parameter_count(&self) -> usize {
        self.convs().iter().map(|c| c.parameter_count()).sum()
    }

    fn convs(&self) -> Vec<&ConvParams> {
        let mut out = vec![&self.head];
        for b in &self.blocks {
            out.push(&b.expand);
            out.push(&b.project);
        }
        out.push(&self.tail);
        out.push(&self.skip);
        out
    }

    /// Parameter slices in declaration order.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.convs().into_iter().flat_map(|c| c.slices()).collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        out.extend(self.head.slices_mut());
        for b in &mut self.blocks {
            out.extend(b.expand.slices_mut());
            out.extend(b.project.slices_mut());
        }
        out.extend(self.tail.slices_mut());
        out.extend(self.skip.slices_mut());
        out
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "model input must have one channel, got {:?}",
                x.shape()
            )));
        }
        x.check_finite("model input")
    }

    /// Unclamped output together with the activations needed by [`SrModel::backward`].
    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let mean = self.config.norm_mean;
        let normalized = x.map(|v| v - mean);
        let mut u = conv2d_forward(&normalized, &self.head).map_err(divergence)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&u)?;
            blocks.push(cache);
            u = next;
        }
        let mut y = conv2d_forward(&u, &self.tail).map_err(divergence)?;
        y.add_assign(&conv2d_forward(&normalized, &self.skip).map_err(divergence)?)?;
        y.data_mut().iter_mut().for_each(|v| *v += mean);
        if !y.is_finite() {
            return Err(Error::NumericalDivergence("model output".into()));
        }
        Ok((
            y,
            ForwardCache {
                normalized,
                blocks,
                body_out: u,
            },
        ))
    }

    /// Unclamped output, as used for the training loss.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_cached(x).map(|(y, _)| y)
    }

    /// Inference output, clamped into `[0, 1]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x)?.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn predict_image(&self, img: &UsImage) -> Result<UsImage> {
        self.predict(&Tensor::from_images([img])?)?.to_image(0)
    }

    /// Pipeline inference: [`SrModel::predict_image`], then the acquired lines
    /// (`l mod s == 0`, scheme taken from the kernel) are copied back from the
    /// input. Those lines were measured and the loss never trains them.
    pub fn refine_image(&self, img: &UsImage) -> Result<UsImage> {
        let pred = self.predict_image(img)?;
        let Some(scheme) = self.config.scheme() else {
            return Ok(pred);
        };
        let depth = img.depth();
        let mut pixels = pred.into_pixels();
        for l in (0..img.lines()).step_by(scheme.stride()) {
            pixels[l * depth..(l + 1) * depth].copy_from_slice(img.line(l));
        }
        UsImage::new(img.lines(), depth, pixels)
    }

    /// Reverse pass. Returns parameter gradients and dLoss/dInput.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Tensor,
    ) -> Result<(ModelGrads, Tensor)> {
        if upstream.shape() != cache.normalized.shape() {
            return Err(Error::ShapeMismatch(format!(
                "upstream {:?} vs output {:?}",
                upstream.shape(),
                cache.normalized.shape()
            )));
        }
        let (skip, mut dx) = conv2d_backward(&cache.normalized, &self.skip, upstream)?;
        let (tail, mut du) = conv2d_backward(&cache.body_out, &self.tail, upstream)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (g, d) = b.backward(c, &du)?;
            du = d;
            blocks.push(g);
        }
        blocks.reverse();
        let (head, dx_head) = conv2d_backward(&cache.normalized, &self.head, &du)?;
        dx.add_assign(&dx_head)?;
        Ok((
            ModelGrads {
                head,
                blocks,
                tail,
                skip,
            },
            dx,
        ))
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            head: ConvGrads::zeros_like(&self.head),
            blocks: self
                .blocks
                .iter()
                .map(|b| {
                    (
                        ConvGrads::zeros_like(&b.expand),
                        ConvGrads::zeros_like(&b.project),
                    )
                })
                .collect(),
            tail: ConvGrads::zeros_like(&self.tail),
            skip: ConvGrads::zeros_like(&self.skip),
        }
    }

    /// Little-endian binary: magic, version, config, parameters in
    /// declaration order, then an FNV-1a 64 checksum of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut buf = Vec::with_capacity(HEADER_LEN + 8 * self.parameter_count() + 8);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [c.blocks, c.width, c.expansion, c.kernel] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.extend_from_slice(&c.norm_mean.to_le_bytes());
        for s in self.param_slices() {
            for v in s {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let sum = fnv1a64(&buf);
        buf.extend_from_slice(&sum.to_le_bytes());
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN + 8 {
            return Err(Error::Format(format!(
                "model file truncated: {} bytes",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not a model file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported model format version {version}"
            )));
        }
        let config = ModelConfig {
            blocks: u32_at(8) as usize,
            width: u32_at(12) as usize,
            expansion: u32_at(16) as usize,
            kernel: u32_at(20) as usize,
            norm_mean: f64::from_le_bytes(bytes[24..32].try_into().unwrap()),
        };
        config.validate()?;
        let expected = HEADER_LEN + 8 * config.parameter_count() + 8;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "model file has {} bytes, config implies {expected}",
                bytes.len()
            )));
        }
        let body = &bytes[..expected - 8];
        let stored = u64::from_le_bytes(bytes[expected - 8..].try_into().unwrap());
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut model = Self::init(config, 0)?;
        let mut off = HEADER_LEN;
        for s in model.param_slices_mut() {
            for v in s.iter_mut() {
                *v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
