use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context};
use log::info;
use nucleus_core::classifier::{self, ClassifierConfig, Objective, Trunk};
use nucleus_core::data::{self, make_splits, Dataset, SplitSpec};
use nucleus_core::encoder::EncoderModel;
use nucleus_core::masking::MaskStrategy;
use nucleus_core::metrics::EvalReport;
use nucleus_core::signal::ImuWindow;
use serde_json::{json, Value};

use super::pretrain::pretrain_corpus;
use super::{
    evaluate, load_classifier, load_descriptions, load_encoder, load_labeled, load_manifest, mirror_pairs,
    semantic_table, write_confusion,
};
use crate::config::{RunConfig, SweepAxis, Toggle};
use crate::output::{ensure_dir, write_csv, write_json};

pub const CLASSIFIER_FILE: &str = "classifier.ckpt";

pub fn finetune(cfg: &RunConfig) -> anyhow::Result<Value> {
    let (encoder, fingerprint) = load_encoder(cfg.checkpoint()?)?;
    let ds = load_labeled(cfg.manifest()?, cfg.num_classes)?;
    let test = match &cfg.inputs.test_manifest {
        Some(p) => Some(load_labeled(p, cfg.num_classes)?),
        None => None,
    };
    let report = finetune_on(cfg, &encoder, &fingerprint, &ds, test.as_ref(), &cfg.out)?;
    Ok(serde_json::to_value(report)?)
}

/// Fine-tunes on a stratified `label_rate` subset of `ds` and evaluates on
/// the remainder, or on all of `test` when given. Writes the classifier
/// checkpoint, loss curve and confusion matrix into `out`.
pub fn finetune_on(
    cfg: &RunConfig,
    encoder: &EncoderModel<f32>,
    encoder_fingerprint: &str,
    ds: &Dataset,
    test: Option<&Dataset>,
    out: &Path,
) -> anyhow::Result<EvalReport> {
    ensure_dir(out)?;
    let k = ds.num_classes();
    let labels = ds.dense_labels()?;
    let split = make_splits(&labels, k, &SplitSpec::stratified(cfg.label_rate, cfg.seed))?;
    let (test_windows, test_labels): (Vec<&ImuWindow>, Vec<usize>) = match test {
        Some(t) => {
            if t.class_names != ds.class_names {
                bail!("test set classes {:?} differ from {:?}", t.class_names, ds.class_names);
            }
            (t.windows.iter().collect(), t.dense_labels()?)
        }
        None => (
            split.test.iter().map(|&i| &ds.windows[i]).collect(),
            split.test.iter().map(|&i| labels[i]).collect(),
        ),
    };
    if test_windows.is_empty() {
        bail!("label_rate {} leaves no test windows", cfg.label_rate);
    }
    let train_windows: Vec<ImuWindow> = split.train.iter().map(|&i| ds.windows[i].clone()).collect();
    let train_labels: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let table = semantic_table(cfg, k)?;
    let classifier_cfg = ClassifierConfig {
        num_classes: k,
        ..cfg.classifier
    };
    info!("fine-tuning on {} windows, testing on {}", train_windows.len(), test_windows.len());
    let outcome = classifier::finetune(
        encoder,
        &train_windows,
        &train_labels,
        &table,
        classifier_cfg,
        cfg.pretrain.nucleus,
        &cfg.finetune,
    )?;
    write_csv(
        &out.join("finetune_curve.csv"),
        &["epoch", "step", "w_s", "w_c", "classification", "semantic", "contrastive", "total"],
        outcome.history.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.step.to_string(),
                r.w_s.to_string(),
                r.w_c.to_string(),
                r.components.classification.to_string(),
                r.components.semantic.to_string(),
                r.components.contrastive.to_string(),
                r.total.to_string(),
            ]
        }),
    )?;
    let container = outcome.classifier.to_container(json!({
        "dataset": ds.name,
        "class_names": ds.class_names,
        "encoder_sha256": encoder_fingerprint,
        "semantic_table_sha256": table.fingerprint(),
    }));
    container.save(&out.join(CLASSIFIER_FILE))?;
    let mut report = evaluate(&outcome.classifier, &test_windows, &test_labels, cfg.eval_batch)?;
    let mirrors = load_descriptions(cfg, k)?.map(|d| mirror_pairs(&d)).unwrap_or_default();
    report.metadata = json!({
        "dataset": ds.name,
        "test_dataset": test.map(|t| t.name.clone()),
        "class_names": ds.class_names,
        "label_rate": cfg.label_rate,
        "seed": cfg.seed,
        "train_windows": train_windows.len(),
        "test_windows": test_windows.len(),
        "encoder_sha256": encoder_fingerprint,
        "classifier_sha256": container.fingerprint()?,
        "semantic_table_sha256": table.fingerprint(),
        "provider_id": table.provider_id,
        "text_guidance": cfg.text_guidance,
        "objective": cfg.finetune.objective,
        "trunk": cfg.classifier.trunk,
        "mirror_pairs": mirrors,
        "mirror_confusion_mass": (!mirrors.is_empty()).then(|| report.pair_confusion_mass(&mirrors)),
    });
    write_confusion(&out.join("confusion.csv"), &report, &ds.class_names)?;
    Ok(report)
}

pub fn eval(cfg: &RunConfig) -> anyhow::Result<Value> {
    let (model, fingerprint) = load_classifier(cfg.checkpoint()?)?;
    let ds = load_labeled(cfg.manifest()?, cfg.num_classes)?;
    if ds.num_classes() != model.config.num_classes {
        bail!(
            "dataset has {} classes, classifier predicts {}",
            ds.num_classes(),
            model.config.num_classes
        );
    }
    let labels = ds.dense_labels()?;
    let windows: Vec<&ImuWindow> = ds.windows.iter().collect();
    let mut report = evaluate(&model, &windows, &labels, cfg.eval_batch)?;
    let mirrors = load_descriptions(cfg, ds.num_classes())?
        .map(|d| mirror_pairs(&d))
        .unwrap_or_default();
    report.metadata = json!({
        "dataset": ds.name,
        "class_names": ds.class_names,
        "test_windows": windows.len(),
        "classifier_sha256": fingerprint,
        "mirror_pairs": mirrors,
        "mirror_confusion_mass": (!mirrors.is_empty()).then(|| report.pair_confusion_mass(&mirrors)),
    });
    write_confusion(&cfg.out.join("confusion.csv"), &report, &ds.class_names)?;
    Ok(serde_json::to_value(report)?)
}

fn point_name(axis: SweepAxis, v: f64) -> String {
    match axis {
        SweepAxis::LabelRate => format!("label_rate={v}"),
        SweepAxis::NumClasses => format!("num_classes={v}"),
    }
}

pub fn sweep(cfg: &RunConfig) -> anyhow::Result<Value> {
    let (encoder, fingerprint) = load_encoder(cfg.checkpoint()?)?;
    let full = load_labeled(cfg.manifest()?, None)?;
    let axis = cfg.sweep.axis;
    let values = cfg.sweep.values.clone().unwrap_or_else(|| match axis {
        SweepAxis::LabelRate => (1..=8).map(|i| f64::from(i) / 10.0).collect(),
        SweepAxis::NumClasses => (2..=full.num_classes()).map(|k| k as f64).collect(),
    });
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &v in &values {
        let mut point = cfg.clone();
        let ds = match axis {
            SweepAxis::LabelRate => {
                point.label_rate = v;
                load_labeled(cfg.manifest()?, cfg.num_classes)?
            }
            SweepAxis::NumClasses => {
                if v.fract() != 0.0 || v < 2.0 {
                    bail!("num_classes sweep value {v} is not an integer >= 2");
                }
                point.num_classes = Some(v as usize);
                load_labeled(cfg.manifest()?, point.num_classes)?
            }
        };
        let point = point.resolve()?;
        let dir = cfg.out.join(point_name(axis, v));
        let report = finetune_on(&point, &encoder, &fingerprint, &ds, None, &dir)?;
        write_json(&dir.join(super::REPORT_FILE), &report)?;
        rows.push((v, report.accuracy, report.macro_f1));
        reports.push(report);
    }
    // Accuracy should not rise as classes are added.
    let violations: Vec<Value> = match axis {
        SweepAxis::LabelRate => Vec::new(),
        SweepAxis::NumClasses => rows
            .windows(2)
            .filter(|w| w[1].1 > w[0].1 + cfg.sweep.trend_tolerance)
            .map(|w| json!({"from": w[0].0, "to": w[1].0, "accuracy_rise": w[1].1 - w[0].1}))
            .collect(),
    };
    write_csv(
        &cfg.out.join("sweep.csv"),
        &["value", "accuracy", "macro_f1"],
        rows.iter().map(|(v, a, f)| vec![v.to_string(), a.to_string(), f.to_string()]),
    )?;
    Ok(json!({
        "axis": axis,
        "values": values,
        "rows": rows.iter().map(|(v, a, f)| json!({"value": v, "accuracy": a, "macro_f1": f})).collect::<Vec<_>>(),
        "trend_violations": violations,
        "reports": reports,
    }))
}

/// Config of one ablation row: the all-on config with `toggle` applied.
pub fn ablation_config(base: &RunConfig, toggle: Option<Toggle>) -> RunConfig {
    let mut c = base.clone();
    match toggle {
        None => {}
        Some(Toggle::RandomMasking) => c.pretrain.mask.strategy = MaskStrategy::Random,
        Some(Toggle::NoInputEncodings) => c.encoder.input_encodings = false,
        Some(Toggle::NoText) => c.text_guidance = false,
        Some(Toggle::NoContrastive) => c.finetune.objective = Objective::CLASSIFICATION_ONLY,
        Some(Toggle::MlpHead) => c.classifier.trunk = Trunk::Mlp,
    }
    c
}

pub fn ablate(cfg: &RunConfig) -> anyhow::Result<Value> {
    let labeled_path = cfg.manifest()?;
    let pretrain_path = cfg.inputs.pretrain_manifest.as_deref().unwrap_or(labeled_path);
    let corpus = data::load_unlabeled(&load_manifest(pretrain_path)?)?;
    let ds = load_labeled(labeled_path, cfg.num_classes)?;
    let toggles = if cfg.toggles.is_empty() {
        Toggle::ALL.to_vec()
    } else {
        cfg.toggles.clone()
    };
    let mut encoders: BTreeMap<(bool, bool), (EncoderModel<f32>, String)> = BTreeMap::new();
    let mut rows = Vec::new();
    for toggle in std::iter::once(None).chain(toggles.into_iter().map(Some)) {
        let name = toggle.map_or("all-on", Toggle::name);
        let mut row = ablation_config(cfg, toggle);
        row.out = cfg.out.join(name);
        ensure_dir(&row.out)?;
        let key = (row.pretrain.mask.strategy == MaskStrategy::Random, row.encoder.input_encodings);
        if !encoders.contains_key(&key) {
            info!("ablation {name}: pretraining");
            let (trainer, pre) = pretrain_corpus(&row, &corpus, None)?;
            write_json(&row.out.join("pretrain_report.json"), &pre)?;
            let fp = pre["checkpoint_sha256"].as_str().context("pretrain fingerprint")?.to_string();
            encoders.insert(key, (trainer.best_model(), fp));
        }
        let (encoder, fp) = &encoders[&key];
        let report = finetune_on(&row, encoder, fp, &ds, None, &row.out)
            .with_context(|| format!("ablation row {name}"))?;
        write_json(&row.out.join(super::REPORT_FILE), &report)?;
        rows.push((name, report));
    }
    write_csv(
        &cfg.out.join("ablation.csv"),
        &["row", "accuracy", "macro_f1", "mirror_confusion_mass"],
        rows.iter().map(|(name, r)| {
            vec![
                name.to_string(),
                r.accuracy.to_string(),
                r.macro_f1.to_string(),
                r.metadata["mirror_confusion_mass"].to_string(),
            ]
        }),
    )?;
    Ok(json!({
        "rows": rows.iter().map(|(name, r)| json!({
            "row": name,
            "accuracy": r.accuracy,
            "macro_f1": r.macro_f1,
            "mirror_confusion_mass": r.metadata["mirror_confusion_mass"],
            "report": r,
        })).collect::<Vec<_>>(),
    }))
}
