use anyhow::Context;
use log::info;
use nucleus_core::checkpoint::Container;
use nucleus_core::data;
use nucleus_core::encoder::{nucleus_region_mse, pretrain_split, Pretrainer};
use nucleus_core::signal::ImuWindow;
use serde_json::{json, Value};

use super::{load_container, load_manifest};
use crate::config::RunConfig;
use crate::output::write_csv;

pub const ENCODER_FILE: &str = "encoder.ckpt";

pub fn pretrain(cfg: &RunConfig) -> anyhow::Result<Value> {
    let manifest = load_manifest(cfg.manifest()?)?;
    let corpus = data::load_unlabeled(&manifest)?;
    let resume = match &cfg.inputs.checkpoint {
        Some(p) => Some(load_container(p)?.0),
        None => None,
    };
    let (_, mut report) = pretrain_corpus(cfg, &corpus, resume.as_ref())?;
    report["corpus"] = json!(manifest.name);
    Ok(report)
}

/// Pretrains on `corpus` (or continues `resume`), writing the checkpoint and
/// loss curve into `cfg.out`.
pub fn pretrain_corpus(
    cfg: &RunConfig,
    corpus: &[ImuWindow],
    resume: Option<&Container>,
) -> anyhow::Result<(Pretrainer, Value)> {
    let mut trainer = match resume {
        Some(c) => {
            let mut t = Pretrainer::resume(c, corpus).context("resuming pretraining")?;
            t.config.max_epochs = cfg.pretrain.max_epochs;
            t.config.max_steps = cfg.pretrain.max_steps;
            t.config.patience = cfg.pretrain.patience;
            t
        }
        None => Pretrainer::new(cfg.encoder, cfg.pretrain, corpus)?,
    };
    let start_epoch = trainer.state.epoch;
    while !trainer.is_finished() {
        let r = trainer.train_epoch()?;
        info!(
            "pretrain epoch {} step {} train {:.5} val {:.5}",
            r.epoch, r.step, r.train_loss, r.val_loss
        );
    }
    let container = trainer.to_container();
    container.save(&cfg.out.join(ENCODER_FILE))?;
    write_csv(
        &cfg.out.join("pretrain_curve.csv"),
        &["epoch", "step", "train_loss", "val_loss"],
        trainer.state.history.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.step.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
            ]
        }),
    )?;
    let test = trainer.test_windows();
    let best = trainer.best_model();
    let cfg_used = trainer.config;
    let test_mse = if test.is_empty() {
        None
    } else {
        Some(nucleus_region_mse(&best, &test, &cfg_used.nucleus, &cfg_used.mask, cfg_used.seed)?)
    };
    let (train, val, test_idx) = pretrain_split(corpus.len(), cfg_used.seed);
    let s = &trainer.state;
    let report = json!({
        "windows": corpus.len(),
        "split": {"train": train.len(), "val": val.len(), "test": test_idx.len()},
        "start_epoch": start_epoch,
        "epochs": s.epoch,
        "steps": s.step,
        "best_val": s.best_val,
        "test_nucleus_mse": test_mse,
        "mask_strategy": cfg_used.mask.strategy,
        "input_encodings": best.config.input_encodings,
        "parameters": best.parameter_count(),
        "checkpoint_sha256": container.fingerprint()?,
    });
    Ok((trainer, report))
}
