use std::time::Instant;

use anyhow::Context;
use nucleus_core::data;
use nucleus_core::signal::{preprocess_with, PreprocessConfig};
use serde_json::{json, Value};

use super::{load_classifier, load_manifest};
use crate::config::RunConfig;

/// Wall time of preprocessing plus prediction on the manifest's first
/// recording. Timings vary run to run; everything else in the report is
/// deterministic.
pub fn bench(cfg: &RunConfig) -> anyhow::Result<Value> {
    let (model, fingerprint) = load_classifier(cfg.checkpoint()?)?;
    let manifest = load_manifest(cfg.manifest()?)?;
    let file = manifest.files.first().context("manifest lists no files")?;
    let recording = data::read_csv(&file.path, &manifest.channel_units)?;
    let pre = PreprocessConfig {
        normalize: manifest.normalization == data::Normalization::Zscore,
        ..PreprocessConfig::default()
    };
    let trials = cfg.trials.max(1);
    let mut samples_ms = Vec::with_capacity(trials);
    let mut predicted = None;
    for _ in 0..trials {
        let start = Instant::now();
        let window = preprocess_with(&recording.samples, &pre)?;
        let p = model.predict(&window)?;
        samples_ms.push(start.elapsed().as_secs_f64() * 1e3);
        predicted = Some(p.class_id);
    }
    let mut sorted = samples_ms.clone();
    sorted.sort_by(f64::total_cmp);
    let p95 = sorted[((0.95 * trials as f64).ceil() as usize).clamp(1, trials) - 1];
    Ok(json!({
        "classifier_sha256": fingerprint,
        "recording": file.path.file_name().map(|n| n.to_string_lossy().into_owned()),
        "predicted_class": predicted,
        "trials": trials,
        "samples_ms": samples_ms,
        "mean_ms": samples_ms.iter().sum::<f64>() / trials as f64,
        "p95_ms": p95,
        "min_ms": sorted[0],
        "max_ms": sorted[trials - 1],
    }))
}
