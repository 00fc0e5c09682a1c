use gradtape::{Adam, AdamConfig, Tensor};
use log::{debug, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::losses::{classification_loss, contrastive_loss, semantic_loss, total_loss, LossComponents, LossSchedule};
use super::model::{ClassifierConfig, GestureClassifier};
use crate::encoder::{EncoderBatch, EncoderModel};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::seed::{self, stream};
use crate::signal::{analyze, ImuWindow, NucleusConfig, NucleusMask, SignificantAxis};
use crate::text::SemanticTable;

/// Which auxiliary terms join the cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub semantic: bool,
    pub contrastive: bool,
}

impl Objective {
    pub const FULL: Self = Self {
        semantic: true,
        contrastive: true,
    };
    pub const CLASSIFICATION_ONLY: Self = Self {
        semantic: false,
        contrastive: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub freeze_encoder: bool,
    pub objective: Objective,
    pub schedule: LossSchedule,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            epochs: 200,
            seed: 0,
            freeze_encoder: false,
            objective: Objective::FULL,
            schedule: LossSchedule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub epoch: usize,
    pub step: usize,
    pub w_s: f64,
    pub w_c: f64,
    /// Batch means over the epoch.
    pub components: LossComponents,
    pub total: f64,
}

pub struct FinetuneOutcome {
    pub classifier: GestureClassifier<f32>,
    pub history: Vec<FinetuneRecord>,
}

/// Every class in `0..k` must appear among `labels`.
pub fn check_coverage(labels: &[usize], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    for &y in labels {
        if y >= k {
            return Err(Error::InvalidInput(format!("label {y} outside [0, {k})")));
        }
        seen[y] = true;
    }
    match seen.iter().position(|s| !s) {
        Some(c) => Err(Error::Stratification(format!("class {c} has no labeled window"))),
        None => Ok(()),
    }
}

/// Shuffled batches; a lone trailing sample joins the previous batch and, when
/// possible, every batch holds at least two samples of one class.
fn epoch_batches(labels: &[usize], batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[stream::SHUFFLE, epoch as u64]));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    for batch in &mut batches {
        let has_pair = batch
            .iter()
            .enumerate()
            .any(|(i, &a)| batch[i + 1..].iter().any(|&b| labels[a] == labels[b]));
        if has_pair || batch.len() < 2 {
            continue;
        }
        let want = labels[batch[0]];
        if let Some(extra) = (0..labels.len()).find(|i| labels[*i] == want && !batch.contains(i)) {
            *batch.last_mut().expect("non-empty") = extra;
        }
    }
    batches
}

pub fn finetune(
    pretrained: &EncoderModel<f32>,
    windows: &[ImuWindow],
    labels: &[usize],
    table: &SemanticTable,
    classifier: ClassifierConfig,
    nucleus: NucleusConfig,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if windows.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} windows but {} labels",
            windows.len(),
            labels.len()
        )));
    }
    if cfg.batch_size < 2 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidConfig(
            "fine-tuning needs batch_size >= 2, epochs >= 1 and lr > 0".into(),
        ));
    }
    let k = classifier.num_classes;
    check_coverage(labels, k)?;
    if table.num_classes() != k {
        return Err(Error::InvalidInput(format!(
            "semantic table covers {} classes, classifier has {k}",
            table.num_classes()
        )));
    }
    let mut model = GestureClassifier::new(pretrained, classifier, nucleus, seed::derive(cfg.seed, &[stream::INIT]))?;
    let analyzed: Vec<(NucleusMask, SignificantAxis)> =
        windows.iter().map(|w| analyze(w, &nucleus)).collect::<Result<_>>()?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let h = classifier.hidden_dim;
    let p = classifier.projection_dim;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let weights = cfg.schedule.weights(epoch, cfg.epochs);
        let mut sums = LossComponents::default();
        let mut total = 0.0;
        let batches = epoch_batches(labels, cfg.batch_size, cfg.seed, epoch);
        for idx in &batches {
            let mut batch = EncoderBatch::new(model.encoder_config.seq_len);
            for &i in idx {
                batch.push(&windows[i], &analyzed[i].0, &analyzed[i].1)?;
            }
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut rng = seed::rng(cfg.seed, &[stream::DROPOUT, step as u64]);
            let mut ctx = Ctx::train(classifier.dropout, &mut rng);
            let mut pass = model.forward_with(&model.params, &batch, &mut ctx, cfg.freeze_encoder);

            let values = |v| -> Vec<f64> { pass.graph.value(v).data().iter().map(|&x| f64::from(x)).collect() };
            let (logits, features, projections) = (values(pass.logits), values(pass.features), values(pass.projections));
            let (ce, g_logits) = classification_loss(&logits, k, &y)?;
            let mut components = LossComponents {
                classification: ce,
                ..LossComponents::default()
            };
            let to_tensor = |g: Vec<f64>, scale: f64, cols: usize| {
                Tensor::new(&[y.len(), cols], g.into_iter().map(|v| (v * scale) as f32).collect())
            };
            let mut inputs = vec![(pass.logits, to_tensor(g_logits, 1.0, k))];
            if cfg.objective.semantic {
                let (l, g) = semantic_loss(&features, h, &y, table)?;
                components.semantic = l;
                inputs.push((pass.features, to_tensor(g, weights.w_s, h)));
            }
            if cfg.objective.contrastive {
                match contrastive_loss(&projections, p, &y, classifier.tau) {
                    Ok((l, g)) => {
                        components.contrastive = l;
                        inputs.push((pass.projections, to_tensor(g, weights.w_c, p)));
                    }
                    Err(Error::DegenerateBatch) => warn!("batch without a same-class pair; contrastive term skipped"),
                    Err(e) => return Err(e),
                }
            }
            let loss = total_loss(&components, &weights);
            let loss_var = pass.graph.custom_scalar(loss as f32, inputs);
            let mut grads = pass.graph.backward(loss_var);
            let grads = model.params.collect_grads(&mut grads, &pass.bound);
            adam.update(&mut model.params, &grads);
            step += 1;

            sums.classification += components.classification;
            sums.semantic += components.semantic;
            sums.contrastive += components.contrastive;
            total += loss;
        }
        let n = batches.len() as f64;
        let record = FinetuneRecord {
            epoch,
            step,
            w_s: weights.w_s,
            w_c: weights.w_c,
            components: LossComponents {
                classification: sums.classification / n,
                semantic: sums.semantic / n,
                contrastive: sums.contrastive / n,
            },
            total: total / n,
        };
        debug!("finetune epoch {epoch} loss {:.5}", record.total);
        history.push(record);
    }
    Ok(FinetuneOutcome {
        classifier: model,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_index_and_hold_a_pair() {
        let labels: Vec<usize> = (0..130).map(|i| i % 13).collect();
        for epoch in 0..5 {
            let batches = epoch_batches(&labels, 10, 3, epoch);
            for b in &batches {
                let mut seen = std::collections::HashSet::new();
                assert!(b.iter().any(|&i| !seen.insert(labels[i])), "no same-class pair");
            }
            assert_eq!(batches.iter().map(Vec::len).sum::<usize>(), 130);
        }
        let batches = epoch_batches(&[0, 1, 0], 2, 1, 0);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].len(), 3);
    }

    #[test]
    fn missing_class_is_a_stratification_error() {
        assert!(matches!(check_coverage(&[0, 2, 2], 3), Err(Error::Stratification(_))));
        assert!(check_coverage(&[0, 1, 2], 3).is_ok());
    }
}
