use std::path::PathBuf;

use clap::Parser;

use crate::config::{RunConfig, Subcommand, SweepAxis, Toggle};

/// Flags override values from `--config`, which override built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "nucleus", version, about = "IMU gesture pretraining and text-guided fine-tuning")]
pub struct Args {
    #[arg(value_enum)]
    pub command: Subcommand,
    /// Partial JSON run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub test_manifest: Option<PathBuf>,
    #[arg(long)]
    pub pretrain_manifest: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub descriptions: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output directory; defaults to `$UNIMOTION_OUT/<command>` or `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub label_rate: Option<f64>,
    #[arg(long)]
    pub num_classes: Option<usize>,
    /// Ablation rows to run besides the all-on row; all five when omitted.
    #[arg(long, value_enum)]
    pub toggle: Vec<Toggle>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long, value_enum)]
    pub axis: Option<SweepAxis>,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    /// Window exported by `attention`.
    #[arg(long)]
    pub window: Option<usize>,
    /// Pretraining optimizer step cap.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Fine-tuning epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Synthetic class count (6 or 7).
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    /// Write the synthetic manifest without labels.
    #[arg(long)]
    pub unlabeled: bool,
}

impl Args {
    pub fn into_config(self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_file(self.command, path)?,
            None => RunConfig::defaults(self.command),
        };
        let i = &mut c.inputs;
        for (slot, flag) in [
            (&mut i.manifest, self.manifest),
            (&mut i.test_manifest, self.test_manifest),
            (&mut i.pretrain_manifest, self.pretrain_manifest),
            (&mut i.checkpoint, self.checkpoint),
            (&mut i.descriptions, self.descriptions),
            (&mut i.embeddings, self.embeddings),
        ] {
            if flag.is_some() {
                *slot = flag;
            }
        }
        if let Some(v) = self.out {
            c.out = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.label_rate {
            c.label_rate = v;
        }
        if self.num_classes.is_some() {
            c.num_classes = self.num_classes;
        }
        if !self.toggle.is_empty() {
            c.toggles = self.toggle;
        }
        if let Some(v) = self.trials {
            c.trials = v;
        }
        if let Some(v) = self.axis {
            c.sweep.axis = v;
        }
        if self.values.is_some() {
            c.sweep.values = self.values;
        }
        if let Some(v) = self.window {
            c.window = v;
        }
        if self.max_steps.is_some() {
            c.pretrain.max_steps = self.max_steps;
        }
        if let Some(v) = self.epochs {
            c.finetune.epochs = v;
        }
        if let Some(v) = self.classes {
            c.synth.classes = v;
        }
        if let Some(v) = self.per_class {
            c.synth.per_class = v;
        }
        if let Some(v) = self.noise {
            c.synth.noise = v;
        }
        c.synth.unlabeled |= self.unlabeled;
        Ok(c)
    }
}
