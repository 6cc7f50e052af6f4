//! Binary PGM I/O with JSON sidecars, the synthetic speckle phantom
//! generator, and dataset construction (decimate, interpolate, split).
//!
//! On disk an image is `P5\n<depth> <lines>\n255\n` followed by one byte per
//! pixel, one row per beamline.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{decimate, SamplingScheme, UsImage};
use crate::parallel;
use crate::resample::upsample_cubic;
use crate::train::Pair;

/// Largest width or height accepted when reading a PGM.
pub const MAX_PGM_DIM: usize = 1 << 16;

pub fn encode_pgm(img: &UsImage) -> Vec<u8> {
    let header = format!("P5\n{} {}\n255\n", img.depth(), img.lines());
    let mut out = Vec::with_capacity(header.len() + img.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(
        img.pixels()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u64> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("malformed header: missing {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse::<u64>()
            .map_err(|_| Error::Format(format!("dimension overflow in {what}")))
    }
}

pub fn decode_pgm(bytes: &[u8]) -> Result<UsImage> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("malformed header: expected P5 magic".into()));
    }
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval.min(u32::MAX as u64) as u32));
    }
    if width == 0 || height == 0 || width > MAX_PGM_DIM as u64 || height > MAX_PGM_DIM as u64 {
        return Err(Error::Format(format!(
            "dimension overflow: {width}x{height}"
        )));
    }
    match bytes.get(c.pos) {
        Some(b) if b.is_ascii_whitespace() => c.pos += 1,
        _ => {
            return Err(Error::Format(
                "malformed header: no separator after maxval".into(),
            ))
        }
    }
    let (depth, lines) = (width as usize, height as usize);
    let payload = &bytes[c.pos..];
    if payload.len() < lines * depth {
        return Err(Error::Format(format!(
            "truncated payload: {} of {} bytes",
            payload.len(),
            lines * depth
        )));
    }
    let pixels = payload[..lines * depth]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    UsImage::new(lines, depth, pixels)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<UsImage> {
    decode_pgm(&fs::read(path)?)
}

/// Writes the PGM and a sidecar with default metadata.
pub fn save_image(img: &UsImage, path: impl AsRef<Path>) -> Result<()> {
    let meta = ImageMeta {
        district: "unspecified".into(),
        lines: img.lines(),
        depth: img.depth(),
        scheme: None,
    };
    save_image_with_meta(img, path, &meta)
}

pub fn save_image_with_meta(img: &UsImage, path: impl AsRef<Path>, meta: &ImageMeta) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img))?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Sidecar metadata. `L` is the full-resolution line count, which differs
/// from the stored line count for a decimated acquisition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub district: String,
    #[serde(rename = "L")]
    pub lines: usize,
    #[serde(rename = "D")]
    pub depth: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scheme: Option<SamplingScheme>,
}

/// `dir/name.pgm` -> `dir/name.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn load_meta(path: impl AsRef<Path>) -> Result<Option<ImageMeta>> {
    let side = sidecar_path(path.as_ref());
    if !side.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(side)?)?))
}

/// Synthetic speckle phantom settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub seed: u64,
    pub count: usize,
    pub lines: usize,
    pub depth: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    pub blob_intensity_min: f64,
    pub blob_intensity_max: f64,
    /// Rayleigh scale of the multiplicative speckle; `sqrt(2/pi)` gives unit mean.
    pub speckle_scale: f64,
    /// Mean echogenicity of the tissue background.
    pub background: f64,
    /// Gaussian correlation length of the speckle across lines, in lines.
    pub speckle_lateral: f64,
    /// Gaussian correlation length of the speckle along depth, in samples.
    pub speckle_axial: f64,
    /// Width of the final axial low-pass, in samples.
    pub axial_smoothing: f64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 16,
            lines: 64,
            depth: 64,
            blobs_min: 2,
            blobs_max: 5,
            blob_intensity_min: 0.03,
            blob_intensity_max: 0.6,
            speckle_scale: (2.0 / std::f64::consts::PI).sqrt(),
            background: 0.25,
            speckle_lateral: 2.5,
            speckle_axial: 1.5,
            axial_smoothing: 1.0,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.lines < 16 || self.depth < 16 {
            return Err(Error::InvalidParameter(format!(
                "phantoms need at least 16x16, got {}x{}",
                self.lines, self.depth
            )));
        }
        if self.count == 0 {
            return Err(Error::InvalidParameter(
                "phantom count must be positive".into(),
            ));
        }
        if self.blobs_min > self.blobs_max
            || self.blob_intensity_min > self.blob_intensity_max
            || !(self.speckle_scale > 0.0)
            || !(self.background >= 0.0)
            || self.speckle_lateral < 0.0
            || self.speckle_axial < 0.0
            || self.axial_smoothing < 0.0
        {
            return Err(Error::InvalidParameter(format!(
                "inconsistent phantom parameters: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Normalized Gaussian taps for standard deviation `sigma`; `[1]` when sigma is 0.
fn gaussian_taps(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable filtering of a `lines x depth` field with edge replication.
fn filter_field(field: &[f64], lines: usize, depth: usize, lat: &[f64], ax: &[f64]) -> Vec<f64> {
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let (rl, ra) = ((lat.len() / 2) as isize, (ax.len() / 2) as isize);
    let mut tmp = vec![0.0; field.len()];
    for l in 0..lines {
        for d in 0..depth {
            tmp[l * depth + d] = ax
                .iter()
                .enumerate()
                .map(|(k, w)| w * field[l * depth + clampi(d as isize + k as isize - ra, depth)])
                .sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for l in 0..lines {
        for d in 0..depth {
            out[l * depth + d] = lat
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[clampi(l as isize + k as isize - rl, lines) * depth + d])
                .sum();
        }
    }
    out
}

fn phantom(p: &PhantomParams, index: usize) -> UsImage {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(index as u64);
    let (lines, depth) = (p.lines, p.depth);
    let (lf, df) = (lines as f64, depth as f64);

    // slowly varying tissue echogenicity
    let fl = rng.random_range(0.2..1.0);
    let fd = rng.random_range(0.2..1.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let mut echo: Vec<f64> = (0..lines * depth)
        .map(|i| {
            let (l, d) = ((i / depth) as f64, (i % depth) as f64);
            let wave =
                0.5 + 0.5 * (std::f64::consts::TAU * (fl * l / lf + fd * d / df) + phase).sin();
            p.background * (0.75 + 0.5 * wave)
        })
        .collect();

    let blobs = rng.random_range(p.blobs_min..=p.blobs_max);
    for _ in 0..blobs {
        let cl = rng.random_range(0.0..lf);
        let cd = rng.random_range(0.0..df);
        let rl = rng.random_range(0.08..0.3) * lf;
        let rd = rng.random_range(0.08..0.3) * df;
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let level = rng.random_range(p.blob_intensity_min..=p.blob_intensity_max);
        let soft = rng.random_range(0.05..0.25);
        let (sn, cs) = theta.sin_cos();
        for (i, e) in echo.iter_mut().enumerate() {
            let (l, d) = ((i / depth) as f64 - cl, (i % depth) as f64 - cd);
            let (u, v) = (cs * l + sn * d, -sn * l + cs * d);
            let r = ((u / rl).powi(2) + (v / rd).powi(2)).sqrt();
            let w = 1.0 / (1.0 + ((r - 1.0) / soft).exp());
            *e = *e * (1.0 - w) + level * w;
        }
    }

    // Rayleigh speckle: magnitude of a correlated circular complex Gaussian field
    let lat = gaussian_taps(p.speckle_lateral);
    let ax = gaussian_taps(p.speckle_axial);
    let gain: f64 = lat.iter().map(|w| w * w).sum::<f64>() * ax.iter().map(|w| w * w).sum::<f64>();
    let noise = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..lines * depth)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let re = filter_field(&noise(&mut rng), lines, depth, &lat, &ax);
    let im = filter_field(&noise(&mut rng), lines, depth, &lat, &ax);
    let unit = 1.0 / gain.sqrt();
    let speckled: Vec<f64> = echo
        .iter()
        .zip(re.iter().zip(&im))
        .map(|(e, (a, b))| e * p.speckle_scale * unit * (a * a + b * b).sqrt())
        .collect();

    let smooth = filter_field(
        &speckled,
        lines,
        depth,
        &[1.0],
        &gaussian_taps(p.axial_smoothing),
    );
    UsImage::from_clamped(lines, depth, smooth).expect("phantom geometry is valid")
}

/// Deterministic per seed: image `i` depends only on `(params, i)`.
pub fn generate_phantoms(p: &PhantomParams) -> Result<Vec<UsImage>> {
    p.validate()?;
    Ok(parallel::map_range(p.count, |i| phantom(p, i)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Relative split proportions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 1500.0,
            val: 400.0,
            test: 200.0,
        }
    }
}

impl SplitRatios {
    /// Largest-remainder apportionment of `n` items; every split gets at least
    /// one item when `n >= 3`.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        let w = [self.train, self.val, self.test];
        if w.iter().any(|x| !(*x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "split ratios must be positive: {self:?}"
            )));
        }
        let total: f64 = w.iter().sum();
        let quotas: Vec<f64> = w.iter().map(|x| x / total * n as f64).collect();
        let mut sizes = [0usize; 3];
        for i in 0..3 {
            sizes[i] = quotas[i].floor() as usize;
        }
        let mut rest: Vec<usize> = (0..3).collect();
        rest.sort_by(|&a, &b| {
            let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        let assigned: usize = sizes.iter().sum();
        for &i in rest.iter().take(n - assigned) {
            sizes[i] += 1;
        }
        if n >= 3 {
            for i in 0..3 {
                if sizes[i] == 0 {
                    let donor = (0..3)
                        .max_by_key(|&j| (sizes[j], std::cmp::Reverse(j)))
                        .unwrap();
                    sizes[donor] -= 1;
                    sizes[i] += 1;
                }
            }
        }
        Ok(sizes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// Paths relative to the manifest's directory.
    pub target: String,
    pub input: String,
    pub lines: usize,
    pub depth: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub district: String,
    pub scheme: SamplingScheme,
    pub seed: u64,
    pub split_ratios: SplitRatios,
    /// Mean target intensity over the training split.
    pub corpus_mean: f64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Clone, Debug)]
pub struct NamedImage {
    pub name: String,
    pub image: UsImage,
}

#[derive(Clone, Debug)]
pub struct BuildOptions {
    pub district: String,
    pub scheme: SamplingScheme,
    pub ratios: SplitRatios,
    pub seed: u64,
}

/// Manifest plus the materialized pairs, index-aligned with `manifest.entries`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub pairs: Vec<Pair>,
}

pub fn build_dataset(targets: &[NamedImage], opts: &BuildOptions) -> Result<Dataset> {
    if targets.len() < 3 {
        return Err(Error::CorpusTooSmall(targets.len()));
    }
    for t in targets {
        t.image.check_pipeline_dims()?;
        opts.scheme.check_lines(t.image.lines())?;
    }
    let sizes = opts.ratios.sizes(targets.len())?;
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let mut splits = vec![Split::Test; targets.len()];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < sizes[0] {
            Split::Train
        } else if rank < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
    }

    let inputs = parallel::map_slice(targets, |t| -> Result<UsImage> {
        let low = decimate(&t.image, opts.scheme)?;
        upsample_cubic(&low, opts.scheme, t.image.lines())
    });
    let mut pairs = Vec::with_capacity(targets.len());
    let mut entries = Vec::with_capacity(targets.len());
    for ((t, input), split) in targets.iter().zip(inputs).zip(&splits) {
        pairs.push(Pair::new(input?, t.image.clone())?);
        entries.push(ManifestEntry {
            name: t.name.clone(),
            target: format!("targets/{}.pgm", t.name),
            input: format!("inputs/{}.pgm", t.name),
            lines: t.image.lines(),
            depth: t.image.depth(),
            split: *split,
        });
    }

    let (mut sum, mut count) = (Vec::new(), 0usize);
    for (t, s) in targets.iter().zip(&splits) {
        if *s == Split::Train {
            sum.push(parallel::pairwise_sum(t.image.pixels()));
            count += t.image.len();
        }
    }
    let corpus_mean = parallel::pairwise_sum(&sum) / count as f64;

    Ok(Dataset {
        manifest: DatasetManifest {
            district: opts.district.clone(),
            scheme: opts.scheme,
            seed: opts.seed,
            split_ratios: opts.ratios,
            corpus_mean,
            entries,
        },
        pairs,
    })
}

impl Dataset {
    pub fn split(&self, which: Split) -> Vec<Pair> {
        self.manifest
            .entries
            .iter()
            .zip(&self.pairs)
            .filter(|(e, _)| e.split == which)
            .map(|(_, p)| p.clone())
            .collect()
    }

    /// Writes `manifest.json`, `targets/*.pgm` and `inputs/*.pgm` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("targets"))?;
        fs::create_dir_all(dir.join("inputs"))?;
        let m = &self.manifest;
        for (e, p) in m.entries.iter().zip(&self.pairs) {
            let meta = ImageMeta {
                district: m.district.clone(),
                lines: e.lines,
                depth: e.depth,
                scheme: None,
            };
            save_image_with_meta(&p.target, dir.join(&e.target), &meta)?;
            let meta = ImageMeta {
                scheme: Some(m.scheme),
                ..meta
            };
            save_image_with_meta(&p.input, dir.join(&e.input), &meta)?;
        }
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(m)?)?;
        Ok(path)
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(manifest_path)?)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let pairs = manifest
            .entries
            .iter()
            .map(|e| {
                let target = load_image(dir.join(&e.target))?;
                let input = load_image(dir.join(&e.input))?;
                if target.lines() != e.lines || target.depth() != e.depth {
                    return Err(Error::InvalidImage(format!(
                        "{} is {}x{}, manifest says {}x{}",
                        e.target,
                        target.lines(),
                        target.depth(),
                        e.lines,
                        e.depth
                    )));
                }
                Pair::new(input, target)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, pairs })
    }
}
