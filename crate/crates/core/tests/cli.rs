use std::path::Path;
use std::process::{Command, Output};

use beamsr::dataio::{save_image_with_meta, DatasetManifest, ImageMeta, PhantomParams};
use beamsr::{decimate, ModelConfig, SamplingScheme, SrModel};

fn beamsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_beamsr"))
        .args(args)
        .output()
        .unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn freq_prints_hertz() {
    let out = beamsr(&["freq", "--depth", "0.1", "--lines", "100"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "77.000000 Hz");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(beamsr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(beamsr(&["freq", "--depth", "0.1"]).status.code(), Some(1));
    assert_eq!(beamsr(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_frequency_inputs_are_data_errors() {
    assert_eq!(
        beamsr(&["freq", "--depth", "0", "--lines", "10"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn two_images_are_too_few_for_a_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = beamsr(&[
        "phantom",
        "--count",
        "2",
        "--lines",
        "16",
        "--depth",
        "16",
        "--out",
        &p(d, "c"),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let out = beamsr(&[
        "build-dataset",
        "--in",
        &p(d, "c"),
        "--scheme",
        "2x",
        "--out",
        &p(d, "ds"),
    ]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn scheme_mismatch_on_predict_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let model = SrModel::init(ModelConfig::for_scheme(SamplingScheme::X4), 0).unwrap();
    model.save(d.join("m.usrm")).unwrap();
    let full = beamsr::dataio::generate_phantoms(&PhantomParams {
        count: 1,
        lines: 32,
        depth: 16,
        ..PhantomParams::default()
    })
    .unwrap()
    .remove(0);
    let low = decimate(&full, SamplingScheme::X2).unwrap();
    let meta = ImageMeta {
        district: "test".into(),
        lines: 32,
        depth: 16,
        scheme: Some(SamplingScheme::X2),
    };
    save_image_with_meta(&low, d.join("low.pgm"), &meta).unwrap();
    let out = beamsr(&[
        "predict",
        "--model",
        &p(d, "m.usrm"),
        "--in",
        &p(d, "low.pgm"),
        "--out",
        &p(d, "o.pgm"),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("o.pgm").exists());
}

#[test]
fn missing_model_file_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = beamsr(&[
        "predict",
        "--model",
        &p(d, "nope.usrm"),
        "--in",
        &p(d, "x.pgm"),
        "--out",
        &p(d, "o.pgm"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn twelve_image_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let ok = |args: &[&str]| {
        let out = beamsr(args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    ok(&[
        "phantom",
        "--seed",
        "4",
        "--count",
        "12",
        "--lines",
        "24",
        "--depth",
        "20",
        "--out",
        &p(d, "c"),
    ]);
    ok(&[
        "build-dataset",
        "--in",
        &p(d, "c"),
        "--scheme",
        "4x",
        "--seed",
        "9",
        "--out",
        &p(d, "ds"),
    ]);
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(d.join("ds/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest.entries.len(), 12);
    let n = |s: &str| {
        manifest
            .entries
            .iter()
            .filter(|e| format!("{:?}", e.split).eq_ignore_ascii_case(s))
            .count()
    };
    assert_eq!((n("train"), n("val"), n("test")), (9, 2, 1));

    std::fs::write(
        d.join("cfg.json"),
        r#"{"model": {"blocks": 1, "width": 4, "expansion": 2}, "train": {"epochs": 2}}"#,
    )
    .unwrap();
    ok(&[
        "train",
        "--manifest",
        &p(d, "ds/manifest.json"),
        "--config",
        &p(d, "cfg.json"),
        "--out-model",
        &p(d, "m.usrm"),
    ]);
    let model = SrModel::load(d.join("m.usrm")).unwrap();
    assert_eq!(model.config().scheme(), Some(SamplingScheme::X4));
    ok(&[
        "evaluate",
        "--model",
        &p(d, "m.usrm"),
        "--manifest",
        &p(d, "ds/manifest.json"),
        "--report",
        &p(d, "r"),
    ]);
    let csv = std::fs::read_to_string(d.join("r/per_image.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(d.join("m.usrm.history.csv").exists());
}
