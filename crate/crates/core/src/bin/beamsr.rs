//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
//! Diagnostics go to stderr; results are written to files (`freq` prints its
//! single number to stdout).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use beamsr::dataio::{
    self, build_dataset, generate_phantoms, BuildOptions, Dataset, ImageMeta, NamedImage,
    PhantomParams, Split, SplitRatios,
};
use beamsr::metrics::{self, DEFAULT_BIN_WIDTH};
use beamsr::train::{
    compare_upsamplers, evaluate, fit_with_progress, FitError, LossParams, MethodSummary,
    TrainConfig,
};
use beamsr::video::{
    acquisition_frequency, frame_name, process_stream, AcquisitionModel, FrameSource,
};
use beamsr::{upsample_cubic, Error, ModelConfig, SamplingScheme, SrModel, Upsampler};

#[derive(Parser)]
#[command(
    name = "beamsr",
    version,
    about = "Lateral beamline super-resolution for ultrasound-style images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic speckle phantom corpus as PGM files.
    Phantom(PhantomArgs),
    /// Decimate, interpolate and split a directory of PGM targets.
    BuildDataset(BuildArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Super-resolve one image.
    Predict(PredictArgs),
    /// Score a model on the test split of a manifest.
    Evaluate(EvaluateArgs),
    /// Super-resolve a directory of numbered frames and report latency.
    Video(VideoArgs),
    /// Frame rate implied by sound speed, depth and line count.
    Freq(FreqArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    lines: usize,
    #[arg(long, default_value_t = 64)]
    depth: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "phantom")]
    district: String,
    /// Name files `frame_%06d.pgm` instead of `phantom_%06d.pgm`.
    #[arg(long)]
    frames: bool,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// 2x or 4x.
    #[arg(long)]
    scheme: SamplingScheme,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the district read from the first sidecar.
    #[arg(long)]
    district: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// JSON with optional `model`, `train` and `init_seed` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_model: PathBuf,
    /// Per-epoch CSV; defaults to `<out-model>.history.csv`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the input sidecar's scheme, then to the model's.
    #[arg(long)]
    scheme: Option<SamplingScheme>,
    /// Full-resolution line count; defaults to the sidecar's `L`.
    #[arg(long)]
    lines: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct VideoArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    frames_dir: PathBuf,
    #[arg(long)]
    scheme: SamplingScheme,
    /// Latency report path (JSON).
    #[arg(long)]
    report: PathBuf,
    /// Output frame directory; defaults to `<frames-dir>_sr`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Frames already hold only the acquired lines of a frame with this many lines.
    #[arg(long)]
    low_res_lines: Option<usize>,
}

#[derive(Args)]
struct FreqArgs {
    #[arg(long, default_value_t = 1540.0)]
    c: f64,
    /// Imaging depth in metres.
    #[arg(long)]
    depth: f64,
    #[arg(long)]
    lines: f64,
}

enum Failure {
    Data(String),
    Divergence(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NumericalDivergence(_) | Error::NonFinite(_) => {
                Failure::Divergence(e.to_string())
            }
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::BuildDataset(a) => build(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Video(a) => video(a),
        Command::Freq(a) => freq(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Divergence(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Sorted `*.pgm` files of a directory.
fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

fn phantom(a: PhantomArgs) -> CliResult {
    let params = PhantomParams {
        seed: a.seed,
        count: a.count,
        lines: a.lines,
        depth: a.depth,
        ..PhantomParams::default()
    };
    let images = generate_phantoms(&params)?;
    fs::create_dir_all(&a.out)?;
    for (i, img) in images.iter().enumerate() {
        let name = if a.frames {
            frame_name(i)
        } else {
            format!("phantom_{i:06}.pgm")
        };
        let meta = ImageMeta {
            district: a.district.clone(),
            lines: img.lines(),
            depth: img.depth(),
            scheme: None,
        };
        dataio::save_image_with_meta(img, a.out.join(name), &meta)?;
    }
    eprintln!("wrote {} phantoms to {}", images.len(), a.out.display());
    Ok(())
}

fn build(a: BuildArgs) -> CliResult {
    let files = pgm_files(&a.input)?;
    let mut targets = Vec::with_capacity(files.len());
    let mut district = a.district.clone();
    for f in &files {
        if district.is_none() {
            district = dataio::load_meta(f)?.map(|m| m.district);
        }
        let image =
            dataio::load_image(f).map_err(|e| Failure::Data(format!("{}: {e}", f.display())))?;
        let name = f.file_stem().unwrap().to_string_lossy().into_owned();
        targets.push(NamedImage { name, image });
    }
    let opts = BuildOptions {
        district: district.unwrap_or_else(|| "unspecified".into()),
        scheme: a.scheme,
        ratios: SplitRatios::default(),
        seed: a.seed,
    };
    let ds = build_dataset(&targets, &opts)?;
    let path = ds.write(&a.out)?;
    let count = |s| ds.manifest.entries.iter().filter(|e| e.split == s).count();
    eprintln!(
        "wrote {}: train {}, val {}, test {}, corpus mean {:.6}",
        path.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        ds.manifest.corpus_mean
    );
    Ok(())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
struct ModelSection {
    blocks: usize,
    width: usize,
    expansion: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let c = ModelConfig::for_scheme(SamplingScheme::X2);
        Self {
            blocks: c.blocks,
            width: c.width,
            expansion: c.expansion,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainFile {
    model: ModelSection,
    train: TrainConfig,
    init_seed: u64,
}

fn train(a: TrainArgs) -> CliResult {
    let cfg: TrainFile = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => TrainFile::default(),
    };
    let ds = Dataset::load(&a.manifest)?;
    let scheme = ds.manifest.scheme;
    let config = ModelConfig {
        blocks: cfg.model.blocks,
        width: cfg.model.width,
        expansion: cfg.model.expansion,
        kernel: scheme.kernel_size(),
        norm_mean: ds.manifest.corpus_mean,
    };
    let model = SrModel::init(config, cfg.init_seed)?;
    eprintln!(
        "training {} parameters for {} epochs on {} images",
        model.parameter_count(),
        cfg.train.epochs,
        ds.split(Split::Train).len()
    );
    let outcome = fit_with_progress(
        model,
        &ds.split(Split::Train),
        &ds.split(Split::Val),
        &cfg.train,
        &LossParams::new(scheme),
        |e| {
            eprintln!(
                "epoch {:>4}  lr {:.3e}  loss {:.6}  val psnr {:.4} dB",
                e.epoch, e.lr, e.train_loss, e.val_psnr
            )
        },
    );
    let history_path = a
        .history
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.history.csv", a.out_model.display())));
    let write_history = |h: &beamsr::train::TrainHistory| -> CliResult {
        if let Some(dir) = history_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(&history_path, h.to_csv())?;
        Ok(())
    };
    match outcome {
        Ok((best, history)) => {
            best.save(&a.out_model)?;
            write_history(&history)?;
            eprintln!("saved {}", a.out_model.display());
            Ok(())
        }
        Err(FitError::Diverged {
            epoch,
            checkpoint,
            history,
        }) => {
            checkpoint.save(&a.out_model)?;
            write_history(&history)?;
            Err(Failure::Divergence(format!(
                "numerical divergence at epoch {epoch}; last finite checkpoint saved to {}",
                a.out_model.display()
            )))
        }
        Err(FitError::Invalid(e)) => Err(e.into()),
    }
}

fn predict(a: PredictArgs) -> CliResult {
    let model = SrModel::load(&a.model)?;
    let img = dataio::load_image(&a.input)?;
    let meta = dataio::load_meta(&a.input)?;
    let scheme = a
        .scheme
        .or(meta.as_ref().and_then(|m| m.scheme))
        .or(model.config().scheme())
        .ok_or_else(|| Failure::Data("cannot infer the sampling scheme; pass --scheme".into()))?;
    model.config().check_scheme(scheme)?;
    let lines = a
        .lines
        .or(meta.as_ref().map(|m| m.lines))
        .unwrap_or(img.lines());
    let full = if lines == img.lines() {
        img
    } else {
        upsample_cubic(&img, scheme, lines)?
    };
    let out = model.refine_image(&full)?;
    let meta = ImageMeta {
        district: meta
            .map(|m| m.district)
            .unwrap_or_else(|| "unspecified".into()),
        lines: out.lines(),
        depth: out.depth(),
        scheme: Some(scheme),
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    dataio::save_image_with_meta(&out, &a.out, &meta)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvaluateReport<'a> {
    scheme: SamplingScheme,
    model: ModelConfig,
    images: usize,
    test_images: Vec<&'a str>,
    input: &'a MethodSummary,
    prediction: &'a MethodSummary,
    deltas: &'a beamsr::train::Deltas,
    max_change_255: f64,
    baselines: Vec<Baseline>,
}

#[derive(Serialize)]
struct Baseline {
    method: String,
    summary: MethodSummary,
}

fn evaluate_cmd(a: EvaluateArgs) -> CliResult {
    let model = SrModel::load(&a.model)?;
    let ds = Dataset::load(&a.manifest)?;
    let scheme = ds.manifest.scheme;
    model.config().check_scheme(scheme)?;
    let names: Vec<&str> = ds
        .manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .map(|e| e.name.as_str())
        .collect();
    let test = ds.split(Split::Test);
    let ev = evaluate(&model, &test)?;
    let targets: Vec<_> = test.iter().map(|p| &p.target).collect();
    let baselines = compare_upsamplers(&targets, scheme, &Upsampler::all())?
        .into_iter()
        .map(|(method, summary)| Baseline { method, summary })
        .collect();

    let dir = &a.report;
    fs::create_dir_all(dir.join("error_images"))?;
    fs::write(dir.join("per_image.csv"), ev.per_image_csv())?;
    let s = &ev.summary;
    write_json(
        &dir.join("summary.json"),
        &EvaluateReport {
            scheme,
            model: *model.config(),
            images: s.images,
            test_images: names.clone(),
            input: &s.input,
            prediction: &s.prediction,
            deltas: &s.deltas,
            max_change_255: s.max_change_255,
            baselines,
        },
    )?;

    let mut hist = String::from("bin,lower_255,upper_255,input_count,prediction_count\n");
    for (k, (i, p)) in s
        .input
        .histogram
        .iter()
        .zip(&s.prediction.histogram)
        .enumerate()
    {
        let lo = k as f64 * DEFAULT_BIN_WIDTH * 255.0;
        let hi = (lo + DEFAULT_BIN_WIDTH * 255.0).min(255.0);
        hist.push_str(&format!("{k},{lo:.1},{hi:.1},{i},{p}\n"));
    }
    fs::write(dir.join("histogram.csv"), hist)?;

    // |error| stretched so the largest error in the report maps to white
    let mut errors = Vec::with_capacity(test.len());
    for (p, pred) in test.iter().zip(&ev.predictions) {
        errors.push((
            metrics::abs_error_image(&p.target, &p.input)?,
            metrics::abs_error_image(&p.target, pred)?,
        ));
    }
    let peak = errors
        .iter()
        .map(|(i, p)| i.max.max(p.max))
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for (name, (ie, pe)) in names.iter().zip(&errors) {
        for (suffix, e) in [("input", ie), ("prediction", pe)] {
            let stretched = beamsr::UsImage::from_clamped(
                e.grid.lines(),
                e.grid.depth(),
                e.grid.pixels().iter().map(|v| v / peak).collect(),
            )?;
            let meta = ImageMeta {
                district: ds.manifest.district.clone(),
                lines: e.grid.lines(),
                depth: e.grid.depth(),
                scheme: Some(scheme),
            };
            dataio::save_image_with_meta(
                &stretched,
                dir.join("error_images")
                    .join(format!("{name}_{suffix}.pgm")),
                &meta,
            )?;
        }
    }
    eprintln!(
        "median psnr {:.4} -> {:.4} dB ({:+.3}%), first bin {:.3}% -> {:.3}%; report in {}",
        s.input.psnr.median,
        s.prediction.psnr.median,
        s.deltas.median_psnr_pct,
        s.input.first_bin_pct,
        s.prediction.first_bin_pct,
        dir.display()
    );
    Ok(())
}

fn video(a: VideoArgs) -> CliResult {
    let model = SrModel::load(&a.model)?;
    model.config().check_scheme(a.scheme)?;
    let files = pgm_files(&a.frames_dir)?;
    if files.is_empty() {
        return Err(Failure::Data(format!(
            "no frames in {}",
            a.frames_dir.display()
        )));
    }
    let source = match a.low_res_lines {
        Some(target_lines) => FrameSource::LowRes { target_lines },
        None => FrameSource::Simulated,
    };
    let frames = files.clone().into_iter().map(dataio::load_image);
    let out = process_stream(frames, a.scheme, &model, source)?;
    let out_dir = a.out.unwrap_or_else(|| {
        let mut name = a.frames_dir.file_name().unwrap_or_default().to_os_string();
        name.push("_sr");
        a.frames_dir.with_file_name(name)
    });
    fs::create_dir_all(&out_dir)?;
    for (seq, frame) in out.sequence.iter().zip(&out.frames) {
        let meta = ImageMeta {
            district: "video".into(),
            lines: frame.lines(),
            depth: frame.depth(),
            scheme: Some(a.scheme),
        };
        dataio::save_image_with_meta(frame, out_dir.join(frame_name(*seq)), &meta)?;
    }
    write_json(&a.report, &out.report)?;
    let r = &out.report;
    eprintln!(
        "{} frames, latency mean {:.3} ms, median {:.3} ms, max {:.3} ms; frames in {}",
        r.frames,
        r.mean_ms,
        r.median_ms,
        r.max_ms,
        out_dir.display()
    );
    Ok(())
}

fn freq(a: FreqArgs) -> CliResult {
    let f = acquisition_frequency(&AcquisitionModel {
        c: a.c,
        depth: a.depth,
        lines: a.lines,
    })?;
    println!("{f:.6} Hz");
    Ok(())
}
