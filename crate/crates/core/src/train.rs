//! Masked logarithmic loss, learning-rate schedule, Adam, the training loop
//! and paired corpus evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::image::{decimate, SamplingScheme, UsImage};
use crate::metrics::{self, box_stats, BoxStats, MetricReport};
use crate::model::{ModelGrads, SrModel};
use crate::netmath::Tensor;
use crate::parallel::{self, pairwise_sum};
use crate::resample::Upsampler;

/// An up-sampled input and the full-resolution target it should become.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub input: UsImage,
    pub target: UsImage,
}

impl Pair {
    pub fn new(input: UsImage, target: UsImage) -> Result<Self> {
        input.ensure_same_shape(&target)?;
        Ok(Self { input, target })
    }

    fn shape(&self) -> (usize, usize) {
        (self.target.lines(), self.target.depth())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub epsilon: f64,
    /// Error level where the log term crosses zero.
    pub k: f64,
    pub scheme: SamplingScheme,
}

impl LossParams {
    pub fn new(scheme: SamplingScheme) -> Self {
        Self {
            epsilon: 1e-4,
            k: 5.0 / 255.0,
            scheme,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.epsilon && self.epsilon < self.k && self.k < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "loss needs 0 < epsilon < k < 1, got epsilon {} k {}",
                self.epsilon, self.k
            )));
        }
        Ok(())
    }
}

/// Mean of `ln((|y - y_hat| + eps) / k)` over pixels on lines the probe did
/// not acquire (`l mod s != 0`). Acquired lines contribute nothing to the
/// loss or its gradient. Returns the loss and dLoss/dPred.
pub fn masked_log_loss(
    pred: &Tensor,
    target: &Tensor,
    params: &LossParams,
) -> Result<(f64, Tensor)> {
    params.validate()?;
    pred.ensure_same_shape(target)?;
    let [batch, ch, lines, depth] = pred.shape();
    params.scheme.check_lines(lines)?;
    let missing: Vec<usize> = (0..lines)
        .filter(|&l| !params.scheme.is_acquired(l))
        .collect();
    let contributing = batch * ch * missing.len() * depth;
    let inv_n = 1.0 / contributing as f64;

    let (p, t) = (pred.data(), target.data());
    let mut terms = Vec::with_capacity(contributing);
    let mut grad = vec![0.0; p.len()];
    for plane in 0..batch * ch {
        for &l in &missing {
            let base = (plane * lines + l) * depth;
            for i in base..base + depth {
                let diff = p[i] - t[i];
                let e = diff.abs() + params.epsilon;
                terms.push((e / params.k).ln());
                grad[i] = if diff > 0.0 {
                    inv_n / e
                } else if diff < 0.0 {
                    -inv_n / e
                } else {
                    0.0
                };
            }
        }
    }
    let loss = pairwise_sum(&terms) * inv_n;
    Ok((loss, Tensor::new(pred.shape(), grad)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments, one moment buffer per parameter slice.
#[derive(Clone, Debug)]
pub struct Adam {
    params: AdamParams,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(model: &SrModel, params: AdamParams) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .param_slices()
            .iter()
            .map(|s| vec![0.0; s.len()])
            .collect();
        Self {
            params,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, model: &mut SrModel, grads: &ModelGrads, lr: f64) {
        self.t += 1;
        let AdamParams { beta1, beta2, eps } = self.params;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        for (((p, g), m), v) in model
            .param_slices_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr_start: 1e-3,
            lr_end: 1e-6,
            batch_size: 8,
            seed: 0,
            adam: AdamParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.lr_end > 0.0 && self.lr_end <= self.lr_start && self.lr_start.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need 0 < lr_end <= lr_start, got {} and {}",
                self.lr_end, self.lr_start
            )));
        }
        Ok(())
    }
}

/// Exponential decay from `lr_start` at epoch 0 to `lr_end` at the last epoch.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidParameter(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    if epoch == 0 {
        return Ok(cfg.lr_start);
    }
    if epoch == cfg.epochs - 1 {
        return Ok(cfg.lr_end);
    }
    let frac = epoch as f64 / (cfg.epochs - 1) as f64;
    Ok(cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(frac))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_psnr: Vec<f64>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.train_loss.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_loss.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_psnr\n");
        for (e, (l, p)) in self.train_loss.iter().zip(&self.val_psnr).enumerate() {
            let _ = writeln!(s, "{e},{l:.9},{p:.6}");
        }
        s
    }
}

/// What one finished epoch looked like; handed to progress callbacks.
#[derive(Clone, Copy, Debug)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_psnr: f64,
}

#[derive(Debug, Error)]
pub enum FitError {
    #[error(transparent)]
    Invalid(#[from] Error),
    /// Training produced a non-finite loss. Carries the best finite checkpoint.
    #[error("numerical divergence at epoch {epoch}")]
    Diverged {
        epoch: usize,
        checkpoint: Box<SrModel>,
        history: TrainHistory,
    },
}

fn check_pairs(pairs: &[Pair], scheme: SamplingScheme, what: &str) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Empty(format!("{what} set is empty")));
    }
    for p in pairs {
        p.input.ensure_same_shape(&p.target)?;
        scheme.check_lines(p.target.lines())?;
    }
    Ok(())
}

/// Loss and gradients of a mini-batch, averaging per-image losses. Items of
/// different geometry are run as separate sub-batches.
pub fn batch_gradient(
    model: &SrModel,
    batch: &[&Pair],
    loss: &LossParams,
) -> Result<(f64, ModelGrads)> {
    let mut groups: BTreeMap<(usize, usize), Vec<&Pair>> = BTreeMap::new();
    for p in batch {
        groups.entry(p.shape()).or_default().push(p);
    }
    let total = batch.len() as f64;
    let mut grads = model.zero_grads();
    let mut value = 0.0;
    for items in groups.values() {
        let x = Tensor::from_images(items.iter().map(|p| &p.input))?;
        let y = Tensor::from_images(items.iter().map(|p| &p.target))?;
        let (pred, cache) = model.forward_cached(&x)?;
        let (l, dl) = masked_log_loss(&pred, &y, loss)?;
        let (g, _) = model.backward(&cache, &dl)?;
        let w = items.len() as f64 / total;
        value += w * l;
        grads.add_scaled(&g, w);
    }
    Ok((value, grads))
}

/// Mean PSNR of clamped predictions against targets.
pub fn mean_psnr(model: &SrModel, pairs: &[Pair]) -> Result<f64> {
    let values = pairs
        .iter()
        .map(|p| metrics::psnr(&p.target, &model.refine_image(&p.input)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&values) / values.len() as f64)
}

pub fn fit(
    model: SrModel,
    train: &[Pair],
    val: &[Pair],
    cfg: &TrainConfig,
    loss: &LossParams,
) -> std::result::Result<(SrModel, TrainHistory), FitError> {
    fit_with_progress(model, train, val, cfg, loss, |_| {})
}

/// Shuffled mini-batch Adam on [`masked_log_loss`]. Returns the parameters
/// with the best validation PSNR seen at the end of any epoch.
pub fn fit_with_progress(
    mut model: SrModel,
    train: &[Pair],
    val: &[Pair],
    cfg: &TrainConfig,
    loss: &LossParams,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> std::result::Result<(SrModel, TrainHistory), FitError> {
    cfg.validate()?;
    loss.validate()?;
    model.config().check_scheme(loss.scheme)?;
    check_pairs(train, loss.scheme, "training")?;
    check_pairs(val, loss.scheme, "validation")?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model, cfg.adam);
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, SrModel)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch)?;
        order.shuffle(&mut rng);
        let mut batch_losses = Vec::new();
        let mut batch_weights = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Pair> = chunk.iter().map(|&i| &train[i]).collect();
            let step = batch_gradient(&model, &batch, loss);
            let (value, grads) = match step {
                Ok(v) => v,
                Err(Error::NumericalDivergence(_)) | Err(Error::NonFinite(_)) => {
                    return Err(diverged(epoch, best, &model, history))
                }
                Err(e) => return Err(e.into()),
            };
            let finite = value.is_finite()
                && grads
                    .slices()
                    .iter()
                    .all(|s| s.iter().all(|v| v.is_finite()));
            if !finite {
                return Err(diverged(epoch, best, &model, history));
            }
            adam.step(&mut model, &grads, lr);
            batch_losses.push(value * chunk.len() as f64);
            batch_weights.push(chunk.len() as f64);
        }
        let train_loss = pairwise_sum(&batch_losses) / pairwise_sum(&batch_weights);
        let val_psnr = match mean_psnr(&model, val) {
            Ok(v) if !v.is_nan() => v,
            Ok(_) | Err(Error::NumericalDivergence(_)) | Err(Error::NonFinite(_)) => {
                return Err(diverged(epoch, best, &model, history))
            }
            Err(e) => return Err(e.into()),
        };
        history.train_loss.push(train_loss);
        history.val_psnr.push(val_psnr);
        on_epoch(&EpochSummary {
            epoch,
            lr,
            train_loss,
            val_psnr,
        });
        if best.as_ref().is_none_or(|(b, _)| val_psnr > *b) {
            best = Some((val_psnr, model.clone()));
        }
    }
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, history))
}

fn diverged(
    epoch: usize,
    best: Option<(f64, SrModel)>,
    current: &SrModel,
    history: TrainHistory,
) -> FitError {
    // With no finished epoch the last finite parameters are the ones we started from.
    let checkpoint = best.map(|(_, m)| m).unwrap_or_else(|| current.clone());
    FitError::Diverged {
        epoch,
        checkpoint: Box::new(checkpoint),
        history,
    }
}

/// Corpus summary for one method (the up-sampled input or the prediction).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub psnr: BoxStats,
    pub ssim: BoxStats,
    pub mae: BoxStats,
    /// Histogram of |error| summed over every pixel of every image.
    pub histogram: Vec<u64>,
    /// Percentage of all pixels whose error falls in the first bin.
    pub first_bin_pct: f64,
}

impl MethodSummary {
    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a MetricReport>) -> Result<Self> {
        let reports: Vec<&MetricReport> = reports.into_iter().collect();
        if reports.is_empty() {
            return Err(Error::Empty("no metric reports to summarize".into()));
        }
        let pick = |f: fn(&MetricReport) -> f64| reports.iter().map(|r| f(r)).collect::<Vec<_>>();
        let bins = reports[0].histogram.len();
        let mut histogram = vec![0u64; bins];
        for r in &reports {
            for (h, c) in histogram.iter_mut().zip(&r.histogram) {
                *h += c;
            }
        }
        Ok(Self {
            psnr: box_stats(&pick(|r| r.psnr))?,
            ssim: box_stats(&pick(|r| r.ssim))?,
            mae: box_stats(&pick(|r| r.mae))?,
            first_bin_pct: 100.0 * metrics::first_bin_fraction(&histogram),
            histogram,
        })
    }
}

/// Prediction minus input, on the statistics the comparisons use.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub median_psnr_db: f64,
    pub median_psnr_pct: f64,
    pub median_ssim: f64,
    pub median_mae: f64,
    pub first_bin_pct_points: f64,
}

impl Deltas {
    pub fn between(input: &MethodSummary, prediction: &MethodSummary) -> Self {
        Self {
            median_psnr_db: prediction.psnr.median - input.psnr.median,
            median_psnr_pct: 100.0 * (prediction.psnr.median - input.psnr.median)
                / input.psnr.median,
            median_ssim: prediction.ssim.median - input.ssim.median,
            median_mae: prediction.mae.median - input.mae.median,
            first_bin_pct_points: prediction.first_bin_pct - input.first_bin_pct,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub index: usize,
    pub input: MetricReport,
    pub prediction: MetricReport,
    /// Largest |prediction - input| on the 0-255 scale.
    pub max_change_255: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub images: usize,
    pub input: MethodSummary,
    pub prediction: MethodSummary,
    pub deltas: Deltas,
    pub max_change_255: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub per_image: Vec<ImageEvaluation>,
    pub summary: EvalSummary,
    pub predictions: Vec<UsImage>,
}

impl Evaluation {
    pub fn per_image_csv(&self) -> String {
        let mut s = String::from(
            "index,input_psnr,input_ssim,input_mae,input_first_bin_pct,\
             prediction_psnr,prediction_ssim,prediction_mae,prediction_first_bin_pct,max_change_255\n",
        );
        for r in &self.per_image {
            let _ = writeln!(
                s,
                "{},{:.6},{:.9},{:.9},{:.6},{:.6},{:.9},{:.9},{:.6},{:.6}",
                r.index,
                r.input.psnr,
                r.input.ssim,
                r.input.mae,
                100.0 * r.input.first_bin_fraction(),
                r.prediction.psnr,
                r.prediction.ssim,
                r.prediction.mae,
                100.0 * r.prediction.first_bin_fraction(),
                r.max_change_255
            );
        }
        s
    }
}

/// Scores the up-sampled inputs and the model's predictions against the
/// targets. Images are evaluated in parallel; results keep test-set order.
pub fn evaluate(model: &SrModel, test: &[Pair]) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Empty("test set is empty".into()));
    }
    let rows = parallel::map_slice(test, |p| -> Result<(ImageEvaluation, UsImage)> {
        p.input.ensure_same_shape(&p.target)?;
        let pred = model.refine_image(&p.input)?;
        let change = metrics::abs_error_image(&pred, &p.input)?;
        Ok((
            ImageEvaluation {
                index: 0,
                input: MetricReport::compute(&p.target, &p.input)?,
                prediction: MetricReport::compute(&p.target, &pred)?,
                max_change_255: change.max_255,
            },
            pred,
        ))
    });
    let mut per_image = Vec::with_capacity(rows.len());
    let mut predictions = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let (mut r, pred) = row?;
        r.index = i;
        per_image.push(r);
        predictions.push(pred);
    }
    let input = MethodSummary::from_reports(per_image.iter().map(|r| &r.input))?;
    let prediction = MethodSummary::from_reports(per_image.iter().map(|r| &r.prediction))?;
    let deltas = Deltas::between(&input, &prediction);
    let max_change_255 = per_image
        .iter()
        .map(|r| r.max_change_255)
        .fold(0.0, f64::max);
    Ok(Evaluation {
        summary: EvalSummary {
            images: per_image.len(),
            input,
            prediction,
            deltas,
            max_change_255,
        },
        per_image,
        predictions,
    })
}

/// Re-runs decimation and each interpolation baseline on the targets.
pub fn compare_upsamplers(
    targets: &[&UsImage],
    scheme: SamplingScheme,
    methods: &[Upsampler],
) -> Result<Vec<(String, MethodSummary)>> {
    methods
        .iter()
        .map(|m| {
            let reports = parallel::map_slice(targets, |t| -> Result<MetricReport> {
                let low = decimate(t, scheme)?;
                let up = m.upsample(&low, scheme, t.lines())?;
                MetricReport::compute(t, &up)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            Ok((m.name().to_string(), MethodSummary::from_reports(&reports)?))
        })
        .collect()
}
