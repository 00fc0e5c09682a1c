//! Stage-2 text-guided classifier: losses, model and fine-tuning.

pub mod losses;
mod model;
mod train;

pub use losses::{
    classification_loss, contrastive_loss, semantic_loss, total_loss, LossComponents, LossSchedule, LossWeights,
};
pub use model::{ClassifierConfig, ClassifierPass, GestureClassifier, Prediction, Trunk, CLASSIFIER_KIND};
pub use train::{check_coverage, finetune, FinetuneConfig, FinetuneOutcome, FinetuneRecord, Objective};
