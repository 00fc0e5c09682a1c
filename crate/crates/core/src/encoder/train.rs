use gradtape::{Adam, AdamConfig, ParamStore, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{masked_mse_with_grad, EncoderBatch, EncoderConfig, EncoderModel};
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::masking::{apply_masks, plan_masks, MaskConfig, MaskPlan, MaskStrategy};
use crate::nn::Ctx;
use crate::seed::{self, stream};
use crate::signal::{analyze, ImuWindow, NucleusConfig, NucleusMask, SignificantAxis, CHANNELS};

/// Windows per forward pass during evaluation.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    /// Optional hard cap on optimizer steps, for budgeted runs.
    #[serde(default)]
    pub max_steps: Option<usize>,
    pub mask: MaskConfig,
    pub nucleus: NucleusConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 128,
            max_epochs: 3200,
            patience: 50,
            max_steps: None,
            mask: MaskConfig::default(),
            nucleus: NucleusConfig::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr {}", self.lr)));
        }
        self.mask.validate()?;
        self.nucleus.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Everything needed to continue a run: current and best parameters,
/// optimizer moments, counters and the loss history.
#[derive(Debug, Clone)]
pub struct PretrainState {
    pub best: ParamStore<f32>,
    pub adam: Adam<f32>,
    pub epoch: usize,
    pub step: usize,
    pub best_val: Option<f64>,
    pub epochs_since_best: usize,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
}

/// A window with its nucleus and significant axis, computed once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub window: ImuWindow,
    pub nucleus: NucleusMask,
    pub axis: SignificantAxis,
}

pub fn prepare(windows: &[ImuWindow], cfg: &NucleusConfig) -> Result<Vec<Prepared>> {
    windows
        .iter()
        .map(|w| {
            let (nucleus, axis) = analyze(w, cfg)?;
            Ok(Prepared {
                window: w.clone(),
                nucleus,
                axis,
            })
        })
        .collect()
}

/// Train/validation/test index lists: a seeded shuffle cut at 80%/10%.
pub fn pretrain_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[stream::SPLIT]));
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = ((0.1 * n as f64).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    (order, val, test)
}

/// Batch of masked windows plus the flat reconstruction targets.
struct MaskedBatch {
    inputs: EncoderBatch,
    targets: Vec<f32>,
    masked: Vec<bool>,
    in_nucleus: Vec<bool>,
}

fn masked_batch(items: &[&Prepared], plans: &[MaskPlan], seq: usize) -> Result<MaskedBatch> {
    let mut inputs = EncoderBatch::new(seq);
    let mut targets = Vec::with_capacity(items.len() * seq * CHANNELS);
    let mut masked = Vec::with_capacity(items.len() * seq);
    let mut in_nucleus = Vec::with_capacity(items.len() * seq);
    for (item, plan) in items.iter().zip(plans) {
        let m = apply_masks(&item.window, plan)?;
        inputs.push(&m.window, &item.nucleus, &item.axis)?;
        targets.extend(item.window.samples().iter().flatten());
        masked.extend_from_slice(&plan.masked);
        in_nucleus.extend_from_slice(&item.nucleus.in_nucleus);
    }
    Ok(MaskedBatch {
        inputs,
        targets,
        masked,
        in_nucleus,
    })
}

fn plan_for(item: &Prepared, cfg: &MaskConfig, plan_seed: u64) -> Result<MaskPlan> {
    plan_masks(&item.nucleus, item.window.pad_mask(), &cfg.with_seed(plan_seed))
}

/// Sum of squared errors and element counts over all masked steps and over
/// masked steps inside the nucleus.
#[derive(Debug, Clone, Copy, Default)]
struct ErrorSums {
    sse: f64,
    count: usize,
    nucleus_sse: f64,
    nucleus_count: usize,
}

fn evaluate(
    model: &EncoderModel<f32>,
    params: &ParamStore<f32>,
    items: &[Prepared],
    plans: &[MaskPlan],
) -> Result<ErrorSums> {
    let mut sums = ErrorSums::default();
    for (chunk, chunk_plans) in items.chunks(EVAL_CHUNK).zip(plans.chunks(EVAL_CHUNK)) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        let batch = masked_batch(&refs, chunk_plans, model.config.seq_len)?;
        let pass = model.forward_with(params, &batch.inputs, &mut Ctx::eval());
        let recon = pass.graph.value(pass.recon).data();
        for (row, _) in batch.masked.iter().enumerate().filter(|(_, &m)| m) {
            let se: f64 = (row * CHANNELS..(row + 1) * CHANNELS)
                .map(|c| (f64::from(recon[c]) - f64::from(batch.targets[c])).powi(2))
                .sum();
            sums.sse += se;
            sums.count += CHANNELS;
            if batch.in_nucleus[row] {
                sums.nucleus_sse += se;
                sums.nucleus_count += CHANNELS;
            }
        }
    }
    Ok(sums)
}

/// Held-out reconstruction MSE restricted to masked nucleus steps. Every
/// model sees the same focused plans, seeded per window from `seed`.
pub fn nucleus_region_mse(
    model: &EncoderModel<f32>,
    windows: &[ImuWindow],
    nucleus: &NucleusConfig,
    mask: &MaskConfig,
    seed: u64,
) -> Result<f64> {
    let items = prepare(windows, nucleus)?;
    let cfg = MaskConfig {
        strategy: MaskStrategy::Focused,
        ..*mask
    };
    let plans = items
        .iter()
        .enumerate()
        .map(|(i, item)| plan_for(item, &cfg, seed::derive(seed, &[stream::EVAL_MASK, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let sums = evaluate(model, &model.params, &items, &plans)?;
    if sums.nucleus_count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(sums.nucleus_sse / sums.nucleus_count as f64)
}

pub struct Pretrainer {
    pub model: EncoderModel<f32>,
    pub config: PretrainConfig,
    pub state: PretrainState,
    train: Vec<Prepared>,
    val: Vec<Prepared>,
    test: Vec<Prepared>,
    val_plans: Vec<MaskPlan>,
}

impl Pretrainer {
    /// Splits `corpus` 80/10/10 and initializes a fresh model.
    pub fn new(encoder: EncoderConfig, config: PretrainConfig, corpus: &[ImuWindow]) -> Result<Self> {
        let (train, val, test) = pretrain_split(corpus.len(), config.seed);
        let pick = |idx: &[usize]| idx.iter().map(|&i| corpus[i].clone()).collect::<Vec<_>>();
        Self::with_split(encoder, config, &pick(&train), &pick(&val), &pick(&test))
    }

    pub fn with_split(
        encoder: EncoderConfig,
        config: PretrainConfig,
        train: &[ImuWindow],
        val: &[ImuWindow],
        test: &[ImuWindow],
    ) -> Result<Self> {
        config.validate()?;
        if train.len() < config.batch_size {
            return Err(Error::InvalidInput(format!(
                "{} training windows, fewer than one batch of {}",
                train.len(),
                config.batch_size
            )));
        }
        let model = EncoderModel::new(encoder, seed::derive(config.seed, &[stream::INIT]))?;
        if let Some(w) = train.iter().chain(val).chain(test).find(|w| w.len() != encoder.seq_len) {
            return Err(Error::InvalidInput(format!(
                "window of {} steps, encoder expects {}",
                w.len(),
                encoder.seq_len
            )));
        }
        let train = prepare(train, &config.nucleus)?;
        let val = prepare(val, &config.nucleus)?;
        let test = prepare(test, &config.nucleus)?;
        let val_plans = val
            .iter()
            .enumerate()
            .map(|(i, item)| {
                plan_for(item, &config.mask, seed::derive(config.seed, &[stream::VALIDATION_MASK, i as u64]))
            })
            .collect::<Result<Vec<_>>>()?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &model.params,
        );
        let state = PretrainState {
            best: model.params.clone(),
            adam,
            epoch: 0,
            step: 0,
            best_val: None,
            epochs_since_best: 0,
            seed: config.seed,
            history: Vec::new(),
        };
        Ok(Self {
            model,
            config,
            state,
            train,
            val,
            test,
            val_plans,
        })
    }

    pub fn test_windows(&self) -> Vec<ImuWindow> {
        self.test.iter().map(|p| p.window.clone()).collect()
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.max_epochs
            || self.state.epochs_since_best >= self.config.patience
            || self.config.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// One optimizer step on `indices` of the training split; returns the
    /// batch loss.
    fn step(&mut self, indices: &[usize]) -> Result<f64> {
        let epoch = self.state.epoch as u64;
        let items: Vec<&Prepared> = indices.iter().map(|&i| &self.train[i]).collect();
        let plans = indices
            .iter()
            .zip(&items)
            .map(|(&i, item)| {
                let s = seed::derive(self.config.seed, &[stream::MASK, epoch, i as u64]);
                plan_for(item, &self.config.mask, s)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = masked_batch(&items, &plans, self.model.config.seq_len)?;

        let mut rng = seed::rng(self.config.seed, &[stream::DROPOUT, self.state.step as u64]);
        let mut ctx = Ctx::train(self.model.config.dropout, &mut rng);
        let mut pass = self.model.forward(&batch.inputs, &mut ctx);
        let recon = pass.graph.value(pass.recon);
        let shape = recon.shape().to_vec();
        let (loss, grad) = masked_mse_with_grad(recon.data(), &batch.targets, &batch.masked)?;
        let loss_var = pass
            .graph
            .custom_scalar(loss as f32, vec![(pass.recon, Tensor::new(&shape, grad))]);
        let mut grads = pass.graph.backward(loss_var);
        let grads = self.model.params.collect_grads(&mut grads, &pass.bound);
        self.state.adam.update(&mut self.model.params, &grads);
        self.state.step += 1;
        Ok(loss)
    }

    fn validation_loss(&self) -> Result<f64> {
        let sums = evaluate(&self.model, &self.model.params, &self.val, &self.val_plans)?;
        if sums.count == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(sums.sse / sums.count as f64)
    }

    /// Runs one pass over the shuffled training split (stopping early at
    /// `max_steps`) and updates the early-stopping state.
    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut seed::rng(
            self.config.seed,
            &[stream::SHUFFLE, self.state.epoch as u64],
        ));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            if self.config.max_steps.is_some_and(|m| self.state.step >= m) {
                break;
            }
            total += self.step(chunk)?;
            batches += 1;
        }
        let train_loss = total / batches.max(1) as f64;
        let val_loss = if self.val.is_empty() {
            train_loss
        } else {
            self.validation_loss()?
        };
        if self.state.best_val.is_none_or(|b| val_loss < b) {
            self.state.best_val = Some(val_loss);
            self.state.best = self.model.params.clone();
            self.state.epochs_since_best = 0;
        } else {
            self.state.epochs_since_best += 1;
        }
        let record = EpochRecord {
            epoch: self.state.epoch,
            step: self.state.step,
            train_loss,
            val_loss,
        };
        debug!(
            "epoch {} step {} train {:.5} val {:.5}",
            record.epoch, record.step, train_loss, val_loss
        );
        self.state.epoch += 1;
        self.state.history.push(record.clone());
        Ok(record)
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.train_epoch()?;
        }
        info!(
            "pretraining stopped after {} epochs, {} steps, best validation loss {:?}",
            self.state.epoch, self.state.step, self.state.best_val
        );
        Ok(())
    }

    /// Model carrying the best-validation parameters.
    pub fn best_model(&self) -> EncoderModel<f32> {
        EncoderModel {
            params: self.state.best.clone(),
            ..self.model.clone()
        }
    }

    /// Checkpoint with best parameters under `param/` (loadable as a plain
    /// encoder) plus everything needed by [`Pretrainer::resume`].
    pub fn to_container(&self) -> Container {
        let s = &self.state;
        let mut c = self.best_model().to_container(json!({
            "epoch": s.epoch,
            "step": s.step,
            "best_val": s.best_val,
            "epochs_since_best": s.epochs_since_best,
            "rng_seed": s.seed,
            "adam_step": s.adam.step,
            "history": s.history,
        }));
        c.config["pretrain"] = serde_json::to_value(self.config).expect("config serializes");
        c.push_store("current", &self.model.params);
        c.push_tensors("adam_m", &self.model.params, &s.adam.first);
        c.push_tensors("adam_v", &self.model.params, &s.adam.second);
        c
    }

    /// Continues a run from a checkpoint written by [`Pretrainer::to_container`].
    /// `corpus` must be the corpus the run started from.
    pub fn resume(c: &Container, corpus: &[ImuWindow]) -> Result<Self> {
        let bad = |m: String| Error::IncompatibleCheckpoint(m);
        let best = EncoderModel::from_container(c)?;
        let config: PretrainConfig = serde_json::from_value(c.config["pretrain"].clone())
            .map_err(|e| bad(format!("pretrain config: {e}")))?;
        let mut trainer = Self::new(best.config, config, corpus)?;
        c.fill_store("current", &mut trainer.model.params)?;
        let meta = &c.metadata;
        let field = |k: &str| meta[k].as_u64().ok_or_else(|| bad(format!("metadata {k}")));
        let s = &mut trainer.state;
        s.best = best.params;
        s.adam.first = c.read_tensors("adam_m", &trainer.model.params)?;
        s.adam.second = c.read_tensors("adam_v", &trainer.model.params)?;
        s.adam.step = field("adam_step")?;
        s.epoch = field("epoch")? as usize;
        s.step = field("step")? as usize;
        s.epochs_since_best = field("epochs_since_best")? as usize;
        s.best_val = meta["best_val"].as_f64();
        s.history = serde_json::from_value(meta["history"].clone())
            .map_err(|e| bad(format!("history: {e}")))?;
        Ok(trainer)
    }
}
