//! Frame-stream super-resolution and the acquisition-frequency model.
//!
//! A stream runs as two stages joined by a bounded queue: a decode stage that
//! produces low-resolution frames, and a refine stage that upsamples and runs
//! the model. Frames carry sequence numbers and the queue is FIFO, so output
//! order always equals input order.

use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{decimate, SamplingScheme, UsImage};
use crate::metrics::box_stats;
use crate::model::{ModelConfig, SrModel};
use crate::resample::upsample_cubic;

pub const SPEED_OF_SOUND: f64 = 1540.0;

/// Frames buffered between the decode and refine stages.
pub const QUEUE_DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionModel {
    /// Speed of sound, m/s.
    pub c: f64,
    /// Imaging depth, m.
    pub depth: f64,
    /// Beamlines per frame.
    pub lines: f64,
}

impl AcquisitionModel {
    pub fn new(depth: f64, lines: f64) -> Self {
        Self {
            c: SPEED_OF_SOUND,
            depth,
            lines,
        }
    }
}

/// Frame rate in hertz: `c / (2 d l)`.
pub fn acquisition_frequency(m: &AcquisitionModel) -> Result<f64> {
    for (name, v) in [("c", m.c), ("depth", m.depth), ("lines", m.lines)] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "{name} must be positive and finite, got {v}"
            )));
        }
    }
    Ok(m.c / (2.0 * m.depth * m.lines))
}

/// How incoming frames relate to the acquisition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrameSource {
    /// Full-resolution frames; each is decimated to simulate a sparse acquisition.
    Simulated,
    /// Frames already hold only the acquired lines of a `target_lines` frame.
    LowRes { target_lines: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub scheme: SamplingScheme,
    pub source: FrameSource,
    pub lines: usize,
    pub depth: usize,
    pub model: ModelConfig,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub frames: usize,
    /// Upsample plus model time for each frame, in input order.
    pub per_frame_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub max_ms: f64,
    pub config: StreamConfig,
}

#[derive(Clone, Debug)]
pub struct StreamOutput {
    pub frames: Vec<UsImage>,
    /// Sequence number of each output frame; equals `0..frames`.
    pub sequence: Vec<usize>,
    pub report: LatencyReport,
}

fn prepare(
    frame: UsImage,
    scheme: SamplingScheme,
    source: FrameSource,
) -> Result<(UsImage, usize)> {
    match source {
        FrameSource::Simulated => {
            let lines = frame.lines();
            Ok((decimate(&frame, scheme)?, lines))
        }
        FrameSource::LowRes { target_lines } => Ok((frame, target_lines)),
    }
}

/// Runs a frame stream through upsampling and the model.
///
/// Frames are consumed lazily; an `Err` item aborts the stream with that error.
/// All frames must share the first frame's shape.
pub fn process_stream<I>(
    frames: I,
    scheme: SamplingScheme,
    model: &SrModel,
    source: FrameSource,
) -> Result<StreamOutput>
where
    I: IntoIterator<Item = Result<UsImage>>,
    I::IntoIter: Send,
{
    model.config().check_scheme(scheme)?;
    if let FrameSource::LowRes { target_lines } = source {
        scheme.check_lines(target_lines)?;
    }
    let frames = frames.into_iter();
    let (tx, rx) = mpsc::sync_channel::<Result<(usize, UsImage, usize)>>(QUEUE_DEPTH);

    thread::scope(|s| {
        s.spawn(move || {
            let mut shape = None;
            for (seq, frame) in frames.enumerate() {
                let item = frame.and_then(|f| {
                    let dims = (f.lines(), f.depth());
                    match shape {
                        None => shape = Some(dims),
                        Some(first) if first != dims => {
                            return Err(Error::ShapeMismatch(format!(
                                "frame {seq} is {}x{}, stream started at {}x{}",
                                dims.0, dims.1, first.0, first.1
                            )))
                        }
                        _ => {}
                    }
                    prepare(f, scheme, source)
                });
                let failed = item.is_err();
                // a closed receiver means the refine stage already stopped
                if tx.send(item.map(|(low, lines)| (seq, low, lines))).is_err() || failed {
                    break;
                }
            }
        });

        let mut out = Vec::new();
        let mut sequence = Vec::new();
        let mut per_frame_ms = Vec::new();
        let mut geometry = None;
        for item in rx {
            let (seq, low, lines) = item?;
            let start = Instant::now();
            let up = upsample_cubic(&low, scheme, lines)?;
            let refined = model.refine_image(&up)?;
            per_frame_ms.push((start.elapsed().as_secs_f64() * 1e3).max(f64::MIN_POSITIVE));
            geometry.get_or_insert((refined.lines(), refined.depth()));
            sequence.push(seq);
            out.push(refined);
        }
        if out.is_empty() {
            return Err(Error::Empty("frame stream".into()));
        }
        let stats = box_stats(&per_frame_ms)?;
        let (lines, depth) = geometry.unwrap();
        Ok(StreamOutput {
            report: LatencyReport {
                frames: out.len(),
                mean_ms: stats.mean,
                median_ms: stats.median,
                max_ms: per_frame_ms.iter().copied().fold(0.0, f64::max),
                per_frame_ms,
                config: StreamConfig {
                    scheme,
                    source,
                    lines,
                    depth,
                    model: *model.config(),
                    threads: crate::parallel::threads(),
                },
            },
            frames: out,
            sequence,
        })
    })
}

/// Convenience wrapper over an in-memory frame list.
pub fn process_frames(
    frames: &[UsImage],
    scheme: SamplingScheme,
    model: &SrModel,
    source: FrameSource,
) -> Result<StreamOutput> {
    process_stream(frames.iter().cloned().map(Ok), scheme, model, source)
}

/// `frame_000042.pgm`.
pub fn frame_name(index: usize) -> String {
    format!("frame_{index:06}.pgm")
}
