//! Fully resolved run configuration: built-in defaults, then an optional JSON
//! file, then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use nucleus_core::classifier::{ClassifierConfig, FinetuneConfig};
use nucleus_core::encoder::{EncoderConfig, PretrainConfig};
use nucleus_core::text::SemanticConstants;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const OUT_ENV: &str = "UNIMOTION_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Subcommand {
    Pretrain,
    Finetune,
    Eval,
    Sweep,
    Ablate,
    Attention,
    Bench,
    Synth,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Finetune => "finetune",
            Self::Eval => "eval",
            Self::Sweep => "sweep",
            Self::Ablate => "ablate",
            Self::Attention => "attention",
            Self::Bench => "bench",
            Self::Synth => "synth",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LabelRate,
    NumClasses,
}

/// The five component ablations, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Toggle {
    /// Focused masking becomes random masking.
    RandomMasking,
    /// No nucleus or significant-axis input encodings.
    NoInputEncodings,
    /// Uniform semantic margins and weights.
    NoText,
    /// Cross-entropy only.
    NoContrastive,
    /// Transformer classifier becomes a mean-pool MLP.
    MlpHead,
}

impl Toggle {
    pub const ALL: [Toggle; 5] = [
        Toggle::RandomMasking,
        Toggle::NoInputEncodings,
        Toggle::NoText,
        Toggle::NoContrastive,
        Toggle::MlpHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::RandomMasking => "random-masking",
            Self::NoInputEncodings => "no-input-encodings",
            Self::NoText => "no-text",
            Self::NoContrastive => "no-contrastive",
            Self::MlpHead => "mlp-head",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Inputs {
    /// Labeled data for fine-tuning and evaluation; unlabeled corpus for
    /// pretraining and attention export.
    pub manifest: Option<PathBuf>,
    /// Evaluation set of a train-on-A, test-on-B run.
    pub test_manifest: Option<PathBuf>,
    /// Unlabeled corpus the ablation pretrains on.
    pub pretrain_manifest: Option<PathBuf>,
    /// Encoder checkpoint (fine-tune, attention, pretrain resume) or
    /// classifier checkpoint (eval, bench).
    pub checkpoint: Option<PathBuf>,
    /// JSON list of class descriptions.
    pub descriptions: Option<PathBuf>,
    /// Precomputed sentence embeddings; the structured provider is used when
    /// absent.
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub axis: SweepAxis,
    /// Defaults to 0.1..=0.8 for label rate and 2..=K for class count.
    pub values: Option<Vec<f64>>,
    /// Accuracy rise over a larger class count tolerated before flagging.
    pub trend_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSettings {
    /// 6 or 7.
    pub classes: usize,
    pub per_class: usize,
    pub noise: f64,
    /// Omit class labels from the manifest.
    pub unlabeled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub subcommand: Subcommand,
    pub out: PathBuf,
    pub seed: u64,
    pub inputs: Inputs,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    /// `num_classes` is replaced by the dataset's class count.
    pub classifier: ClassifierConfig,
    pub finetune: FinetuneConfig,
    pub semantic: SemanticConstants,
    /// Uses the class descriptions; otherwise uniform margins and weights.
    pub text_guidance: bool,
    pub label_rate: f64,
    /// Keep only the first N classes.
    pub num_classes: Option<usize>,
    pub toggles: Vec<Toggle>,
    pub sweep: SweepSettings,
    pub synth: SynthSettings,
    pub trials: usize,
    /// Window exported by the attention subcommand.
    pub window: usize,
    pub eval_batch: usize,
}

impl RunConfig {
    pub fn defaults(subcommand: Subcommand) -> Self {
        Self {
            subcommand,
            out: default_out(subcommand),
            seed: 0,
            inputs: Inputs::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            classifier: ClassifierConfig::new(2),
            finetune: FinetuneConfig::default(),
            semantic: SemanticConstants::default(),
            text_guidance: true,
            label_rate: 0.1,
            num_classes: None,
            toggles: Vec::new(),
            sweep: SweepSettings {
                axis: SweepAxis::LabelRate,
                values: None,
                trend_tolerance: 0.05,
            },
            synth: SynthSettings {
                classes: 6,
                per_class: 100,
                noise: 0.3,
                unlabeled: false,
            },
            trials: 10,
            window: 0,
            eval_batch: 64,
        }
    }

    /// Defaults overlaid with `file`, a partial JSON object. Unknown keys are
    /// errors.
    pub fn from_file(subcommand: Subcommand, file: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(file).with_context(|| format!("reading config {}", file.display()))?;
        let overlay: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", file.display()))?;
        Self::with_overlay(subcommand, overlay)
    }

    pub fn with_overlay(subcommand: Subcommand, overlay: Value) -> anyhow::Result<Self> {
        let mut base = serde_json::to_value(Self::defaults(subcommand))?;
        merge(&mut base, overlay, "")?;
        base["subcommand"] = serde_json::to_value(subcommand)?;
        Ok(serde_json::from_value(base)?)
    }

    /// Propagates the run seed into every component.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        self.pretrain.seed = self.seed;
        self.finetune.seed = self.seed;
        if !(self.label_rate > 0.0 && self.label_rate <= 1.0) {
            bail!("label_rate {} outside (0, 1]", self.label_rate);
        }
        if self.eval_batch == 0 {
            bail!("eval_batch must be positive");
        }
        self.toggles.sort_unstable();
        self.toggles.dedup();
        Ok(self)
    }

    pub fn manifest(&self) -> anyhow::Result<&Path> {
        self.inputs.manifest.as_deref().context("--manifest is required")
    }

    pub fn checkpoint(&self) -> anyhow::Result<&Path> {
        self.inputs.checkpoint.as_deref().context("--checkpoint is required")
    }
}

fn default_out(subcommand: Subcommand) -> PathBuf {
    let root = std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(subcommand.name())
}

fn merge(base: &mut Value, overlay: Value, path: &str) -> anyhow::Result<()> {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &here)?,
                    None => bail!("unknown config key {here:?}"),
                }
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn partial_overlay_keeps_other_defaults() {
        let c = RunConfig::with_overlay(
            Subcommand::Pretrain,
            json!({"pretrain": {"lr": 0.01, "max_steps": 5, "mask": {"strategy": "random"}}}),
        )
        .unwrap();
        assert_eq!(c.pretrain.lr, 0.01);
        assert_eq!(c.pretrain.max_steps, Some(5));
        assert_eq!(c.pretrain.batch_size, 128);
        assert_eq!(c.pretrain.mask.mask_ratio, 0.15);
        assert_eq!(c.encoder, EncoderConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::with_overlay(Subcommand::Eval, json!({"pretrain": {"lrr": 1}})).unwrap_err();
        assert!(err.to_string().contains("pretrain.lrr"));
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::defaults(Subcommand::Finetune).resolve().unwrap();
        let back: RunConfig = serde_json::from_value(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn seed_reaches_every_component() {
        let mut c = RunConfig::defaults(Subcommand::Finetune);
        c.seed = 42;
        let c = c.resolve().unwrap();
        assert_eq!((c.pretrain.seed, c.finetune.seed), (42, 42));
    }
}
