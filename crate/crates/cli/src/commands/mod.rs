//! One function per subcommand. Each writes its frozen config and a JSON
//! report into the run's output directory and returns the report.

mod attention;
mod bench;
mod finetune;
mod pretrain;
mod synth;

pub use attention::attention;
pub use bench::bench;
pub use finetune::{ablate, eval, finetune, finetune_on, sweep};
pub use pretrain::{pretrain, pretrain_corpus};
pub use synth::synth;

use std::path::Path;

use anyhow::{bail, Context};
use nucleus_core::checkpoint::Container;
use nucleus_core::classifier::GestureClassifier;
use nucleus_core::data::{self, Dataset, DatasetManifest};
use nucleus_core::encoder::EncoderModel;
use nucleus_core::metrics::EvalReport;
use nucleus_core::signal::ImuWindow;
use nucleus_core::text::{derive_margins_weights, Direction, GestureDescription, Provider, SemanticTable};
use serde_json::Value;

use crate::config::{RunConfig, Subcommand};
use crate::output::{ensure_dir, read_json, write_json};

pub const CONFIG_FILE: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";

/// Resolves `cfg`, runs its subcommand and writes `config.json` and
/// `report.json` under `cfg.out`.
pub fn run(cfg: RunConfig) -> anyhow::Result<Value> {
    let cfg = cfg.resolve()?;
    ensure_dir(&cfg.out)?;
    write_json(&cfg.out.join(CONFIG_FILE), &cfg)?;
    let report = match cfg.subcommand {
        Subcommand::Pretrain => pretrain(&cfg),
        Subcommand::Finetune => finetune(&cfg),
        Subcommand::Eval => eval(&cfg),
        Subcommand::Sweep => sweep(&cfg),
        Subcommand::Ablate => ablate(&cfg),
        Subcommand::Attention => attention(&cfg),
        Subcommand::Bench => bench(&cfg),
        Subcommand::Synth => synth(&cfg),
    }?;
    write_json(&cfg.out.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn load_manifest(path: &Path) -> anyhow::Result<DatasetManifest> {
    DatasetManifest::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

/// Fully labeled dataset, optionally restricted to its first `num_classes`
/// classes.
fn load_labeled(path: &Path, num_classes: Option<usize>) -> anyhow::Result<Dataset> {
    let ds = data::load_dataset(&load_manifest(path)?)?;
    let labels = ds.dense_labels().with_context(|| format!("{} must be fully labeled", path.display()))?;
    let Some(n) = num_classes else { return Ok(ds) };
    if n < 2 || n > ds.num_classes() {
        bail!("num_classes {n} outside [2, {}]", ds.num_classes());
    }
    let keep: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] < n).collect();
    let mut sub = ds.subset(&keep);
    sub.class_names.truncate(n);
    Ok(sub)
}

fn load_container(path: &Path) -> anyhow::Result<(Container, String)> {
    let c = Container::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let fp = c.fingerprint()?;
    Ok((c, fp))
}

fn load_encoder(path: &Path) -> anyhow::Result<(EncoderModel<f32>, String)> {
    let (c, fp) = load_container(path)?;
    Ok((EncoderModel::from_container(&c)?, fp))
}

fn load_classifier(path: &Path) -> anyhow::Result<(GestureClassifier<f32>, String)> {
    let (c, fp) = load_container(path)?;
    Ok((GestureClassifier::from_container(&c)?, fp))
}

/// Descriptions for classes `0..k`, in class order.
fn load_descriptions(cfg: &RunConfig, k: usize) -> anyhow::Result<Option<Vec<GestureDescription>>> {
    let Some(path) = &cfg.inputs.descriptions else { return Ok(None) };
    let all: Vec<GestureDescription> = read_json(path)?;
    let descs = (0..k)
        .map(|c| {
            all.iter()
                .find(|d| d.class_id == c)
                .cloned()
                .with_context(|| format!("{} has no description for class {c}", path.display()))
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(Some(descs))
}

/// Semantic table for `k` classes. Without descriptions only a
/// cross-entropy-only objective can run; it gets a placeholder table.
fn semantic_table(cfg: &RunConfig, k: usize) -> anyhow::Result<SemanticTable> {
    let provider = match &cfg.inputs.embeddings {
        Some(p) => Provider::External(p.clone()),
        None => Provider::Structured,
    };
    let table = match load_descriptions(cfg, k)? {
        Some(descs) => SemanticTable::build(&descs, &provider, &cfg.semantic)?,
        None if !cfg.finetune.objective.semantic => {
            let identity = (0..k).map(|i| (0..k).map(|j| f64::from(u8::from(i == j))).collect()).collect();
            derive_margins_weights(identity, "none", &cfg.semantic)?
        }
        None => bail!("the semantic loss needs class descriptions; pass --descriptions"),
    };
    Ok(if cfg.text_guidance {
        table
    } else {
        table.uniform(&cfg.semantic)
    })
}

/// Class pairs whose descriptions differ only in opposite directions.
fn mirror_pairs(descs: &[GestureDescription]) -> Vec<(usize, usize)> {
    let opposite = |a: Direction, b: Direction| {
        matches!(
            (a, b),
            (Direction::Up, Direction::Down)
                | (Direction::Down, Direction::Up)
                | (Direction::Left, Direction::Right)
                | (Direction::Right, Direction::Left)
        )
    };
    let mut pairs = Vec::new();
    for (i, a) in descs.iter().enumerate() {
        for (j, b) in descs.iter().enumerate().skip(i + 1) {
            let (x, y) = (a.attributes, b.attributes);
            if opposite(x.direction, y.direction)
                && x.motion_type == y.motion_type
                && x.category == y.category
                && x.complexity == y.complexity
            {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

fn predict_all(model: &GestureClassifier<f32>, windows: &[&ImuWindow], batch: usize) -> anyhow::Result<Vec<usize>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(batch) {
        out.extend(model.predict_batch(chunk)?.into_iter().map(|p| p.class_id));
    }
    Ok(out)
}

fn evaluate(
    model: &GestureClassifier<f32>,
    windows: &[&ImuWindow],
    labels: &[usize],
    batch: usize,
) -> anyhow::Result<EvalReport> {
    let predicted = predict_all(model, windows, batch)?;
    let report = EvalReport::from_predictions(labels, &predicted, model.config.num_classes)?;
    report.check_invariants()?;
    Ok(report)
}

fn write_confusion(path: &Path, report: &EvalReport, class_names: &[String]) -> anyhow::Result<()> {
    let mut header = vec!["true\\predicted"];
    header.extend(class_names.iter().map(String::as_str));
    let rows = report.confusion.iter().zip(class_names).map(|(row, name)| {
        std::iter::once(name.clone()).chain(row.iter().map(ToString::to_string)).collect::<Vec<_>>()
    });
    crate::output::write_csv(path, &header, rows)
}
