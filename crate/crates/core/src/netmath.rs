//! Rank-4 tensors, weight-normalized "same" convolution, and ReLU with
//! hand-derived backward passes.
//!
//! Layout is `(batch, channels, lines, depth)`, row-major. A convolution
//! weight is reparameterized per output channel as `W_o = g_o * v_o / |v_o|`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::image::UsImage;
use crate::parallel;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Stacks single-channel images into a `batch x 1 x L x D` tensor.
    pub fn from_images<'a, I>(images: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a UsImage>,
    {
        let mut data = Vec::new();
        let mut geom: Option<(usize, usize)> = None;
        let mut batch = 0;
        for img in images {
            match geom {
                None => geom = Some((img.lines(), img.depth())),
                Some(g) if g != (img.lines(), img.depth()) => {
                    return Err(Error::ShapeMismatch(format!(
                        "batch mixes {}x{} with {}x{}",
                        g.0,
                        g.1,
                        img.lines(),
                        img.depth()
                    )))
                }
                _ => {}
            }
            data.extend_from_slice(img.pixels());
            batch += 1;
        }
        let (l, d) = geom.ok_or_else(|| Error::Empty("no images to stack".into()))?;
        Self::new([batch, 1, l, d], data)
    }

    /// Extracts batch item `n` of a single-channel tensor, clamped into `[0, 1]`.
    pub fn to_image(&self, n: usize) -> Result<UsImage> {
        let [b, c, l, d] = self.shape;
        if c != 1 || n >= b {
            return Err(Error::ShapeMismatch(format!(
                "cannot take image {n} from tensor {:?}",
                self.shape
            )));
        }
        UsImage::from_clamped(l, d, self.data[n * l * d..(n + 1) * l * d].to_vec())
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn lines(&self) -> usize {
        self.shape[2]
    }

    pub fn depth(&self) -> usize {
        self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let p = self.plane_len();
        let start = (n * self.shape[1] + c) * p;
        &self.data[start..start + p]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn ensure_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape == other.shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )))
        }
    }
}

/// Weight-normalized convolution parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    /// Direction, `(out_ch, in_ch, k, k)`.
    pub v: Vec<f64>,
    /// Per-output-channel gain.
    pub g: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    pub fn new(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        v: Vec<f64>,
        g: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if out_ch == 0 || in_ch == 0 {
            return Err(Error::InvalidParameter("convolution needs channels".into()));
        }
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "kernel size must be odd, got {kernel}"
            )));
        }
        if v.len() != out_ch * in_ch * kernel * kernel || g.len() != out_ch || bias.len() != out_ch
        {
            return Err(Error::ShapeMismatch(format!(
                "conv {out_ch}x{in_ch}x{kernel}x{kernel}: got v {}, g {}, bias {}",
                v.len(),
                g.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_ch,
            in_ch,
            kernel,
            v,
            g,
            bias,
        })
    }

    /// Fan-in scaled random direction with gain `gain_scale * |v_o|`, so the
    /// effective weight starts at `gain_scale` times a He-normal draw.
    pub fn he_init<R: Rng + ?Sized>(
        out_ch: usize,
        in_ch: usize,
        kernel: usize,
        gain_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let v: Vec<f64> = (0..out_ch * fan_in)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let g = v
            .chunks(fan_in)
            .map(|c| gain_scale * c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        Self::new(out_ch, in_ch, kernel, v, g, vec![0.0; out_ch])
    }

    /// Single-channel pass-through: centre tap 1, gain 1, bias 0.
    pub fn identity(kernel: usize) -> Result<Self> {
        let mut v = vec![0.0; kernel * kernel];
        v[kernel * kernel / 2] = 1.0;
        Self::new(1, 1, kernel, v, vec![1.0], vec![0.0])
    }

    pub fn out_channels(&self) -> usize {
        self.out_ch
    }

    pub fn in_channels(&self) -> usize {
        self.in_ch
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn filter_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn parameter_count(&self) -> usize {
        self.v.len() + self.g.len() + self.bias.len()
    }

    fn direction_norms(&self) -> Result<Vec<f64>> {
        self.v
            .chunks(self.filter_len())
            .enumerate()
            .map(|(o, c)| {
                let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                if n > 0.0 && n.is_finite() {
                    Ok(n)
                } else {
                    Err(Error::InvalidParameter(format!(
                        "direction of output channel {o} has norm {n}"
                    )))
                }
            })
            .collect()
    }

    /// Effective weight `W_o = g_o v_o / |v_o|`, shaped `(out, in, k, k)`.
    pub fn weight_materialize(&self) -> Result<Tensor> {
        let norms = self.direction_norms()?;
        let fl = self.filter_len();
        let mut w = self.v.clone();
        for (o, c) in w.chunks_mut(fl).enumerate() {
            let s = self.g[o] / norms[o];
            c.iter_mut().for_each(|x| *x *= s);
        }
        Tensor::new([self.out_ch, self.in_ch, self.kernel, self.kernel], w)
    }

    /// Parameter slices in declaration order: direction, gain, bias.
    pub fn slices(&self) -> [&[f64]; 3] {
        [&self.v, &self.g, &self.bias]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.v, &mut self.g, &mut self.bias]
    }
}

/// Gradients mirroring a [`ConvParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub v: Vec<f64>,
    pub g: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrads {
    pub fn zeros_like(p: &ConvParams) -> Self {
        Self {
            v: vec![0.0; p.v.len()],
            g: vec![0.0; p.g.len()],
            bias: vec![0.0; p.bias.len()],
        }
    }

    pub fn slices(&self) -> [&[f64]; 3] {
        [&self.v, &self.g, &self.bias]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [&mut self.v, &mut self.g, &mut self.bias]
    }
}

/// Index range `lo..hi` of positions `y` with `0 <= y + off < len`.
#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

fn check_conv_input(x: &Tensor, p: &ConvParams) -> Result<()> {
    if x.channels() != p.in_ch {
        return Err(Error::ShapeMismatch(format!(
            "convolution expects {} input channels, tensor has {}",
            p.in_ch,
            x.channels()
        )));
    }
    Ok(())
}

/// "Same" zero-padded convolution: `out = W * x + bias`, spatial shape kept.
pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    check_conv_input(x, p)?;
    x.check_finite("convolution input")?;
    let w = p.weight_materialize()?;
    let [batch, in_ch, lines, depth] = x.shape();
    let (out_ch, k) = (p.out_ch, p.kernel);
    let r = (k / 2) as isize;
    let plane = lines * depth;
    let mut out = Tensor::zeros([batch, out_ch, lines, depth]);
    let wd = w.data();
    parallel::for_each_chunk_mut(out.data_mut(), plane, |idx, dst| {
        let (n, o) = (idx / out_ch, idx % out_ch);
        dst.fill(p.bias[o]);
        for i in 0..in_ch {
            let src = x.plane(n, i);
            let wo = &wd[(o * in_ch + i) * k * k..(o * in_ch + i + 1) * k * k];
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = valid_range(lines, dy);
                for kx in 0..k {
                    let wt = wo[ky * k + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - r;
                    let (x0, x1) = valid_range(depth, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let drow = &mut dst[y * depth + x0..y * depth + x1];
                        let srow = &src[sy * depth + (x0 as isize + dx) as usize
                            ..sy * depth + (x1 as isize + dx) as usize];
                        for (a, b) in drow.iter_mut().zip(srow) {
                            *a += wt * b;
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Dot product with four independent accumulators so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac
        .remainder()
        .iter()
        .zip(bc.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ac.zip(bc) {
        for j in 0..4 {
            lanes[j] += x[j] * y[j];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}

/// Gradients of a scalar loss through [`conv2d_forward`], given `upstream`
/// = dLoss/dOutput. Returns parameter gradients under the weight-norm
/// reparameterization and dLoss/dInput.
pub fn conv2d_backward(
    x: &Tensor,
    p: &ConvParams,
    upstream: &Tensor,
) -> Result<(ConvGrads, Tensor)> {
    check_conv_input(x, p)?;
    let [batch, in_ch, lines, depth] = x.shape();
    let (out_ch, k) = (p.out_ch, p.kernel);
    if upstream.shape() != [batch, out_ch, lines, depth] {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient {:?} does not match convolution output {:?}",
            upstream.shape(),
            [batch, out_ch, lines, depth]
        )));
    }
    let w = p.weight_materialize()?;
    let wd = w.data();
    let r = (k / 2) as isize;
    let plane = lines * depth;

    let bias: Vec<f64> = parallel::map_range(out_ch, |o| {
        (0..batch)
            .map(|n| parallel::pairwise_sum(upstream.plane(n, o)))
            .sum()
    });

    // dL/dW[o, i, ky, kx] = sum_n sum_y,x up[n, o, y, x] * x[n, i, y + dy, x + dx]
    let mut gw = vec![0.0; out_ch * in_ch * k * k];
    parallel::for_each_chunk_mut(&mut gw, k * k, |oi, taps| {
        let (o, i) = (oi / in_ch, oi % in_ch);
        for ky in 0..k {
            let dy = ky as isize - r;
            let (y0, y1) = valid_range(lines, dy);
            for kx in 0..k {
                let dx = kx as isize - r;
                let (x0, x1) = valid_range(depth, dx);
                let mut acc = 0.0;
                for n in 0..batch {
                    let up = upstream.plane(n, o);
                    let src = x.plane(n, i);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let urow = &up[y * depth + x0..y * depth + x1];
                        let srow = &src[sy * depth + (x0 as isize + dx) as usize
                            ..sy * depth + (x1 as isize + dx) as usize];
                        acc += dot(urow, srow);
                    }
                }
                taps[ky * k + kx] = acc;
            }
        }
    });

    // dL/dx[n, i, y + dy, x + dx] += W[o, i, ky, kx] * up[n, o, y, x]
    let mut gx = Tensor::zeros(x.shape());
    parallel::for_each_chunk_mut(gx.data_mut(), plane, |idx, dst| {
        let (n, i) = (idx / in_ch, idx % in_ch);
        for o in 0..out_ch {
            let up = upstream.plane(n, o);
            let wo = &wd[(o * in_ch + i) * k * k..(o * in_ch + i + 1) * k * k];
            for ky in 0..k {
                let dy = ky as isize - r;
                let (y0, y1) = valid_range(lines, dy);
                for kx in 0..k {
                    let wt = wo[ky * k + kx];
                    if wt == 0.0 {
                        continue;
                    }
                    let dx = kx as isize - r;
                    let (x0, x1) = valid_range(depth, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let urow = &up[y * depth + x0..y * depth + x1];
                        let drow = &mut dst[sy * depth + (x0 as isize + dx) as usize
                            ..sy * depth + (x1 as isize + dx) as usize];
                        for (a, b) in drow.iter_mut().zip(urow) {
                            *a += wt * b;
                        }
                    }
                }
            }
        }
    });

    // Weight norm: with u = v/|v|, dL/dg = <dL/dW, u>, dL/dv = g/|v| (dL/dW - dL/dg u).
    let norms = p.direction_norms()?;
    let fl = p.filter_len();
    let mut gv = vec![0.0; gw.len()];
    let mut gg = vec![0.0; out_ch];
    for o in 0..out_ch {
        let vo = &p.v[o * fl..(o + 1) * fl];
        let gwo = &gw[o * fl..(o + 1) * fl];
        let dg: f64 = vo.iter().zip(gwo).map(|(v, g)| v * g).sum::<f64>() / norms[o];
        gg[o] = dg;
        let s = p.g[o] / norms[o];
        for ((dst, &v), &g) in gv[o * fl..(o + 1) * fl].iter_mut().zip(vo).zip(gwo) {
            *dst = s * (g - dg * v / norms[o]);
        }
    }

    Ok((ConvGrads { v: gv, g: gg, bias }, gx))
}

/// NaN passes through so that divergence stays visible downstream.
pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v <= 0.0 { 0.0 } else { v })
}

/// Passes `upstream` where `x > 0`, zero elsewhere.
pub fn relu_backward(x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    x.ensure_same_shape(upstream)?;
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xi, &u)| if xi > 0.0 { u } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data)
}
