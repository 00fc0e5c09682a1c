use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::pretrain_split;
use crate::error::{Error, Result};
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// 80/10/10 by window.
    #[serde(rename = "pretrain-80-10-10")]
    Pretrain,
    /// `label_rate` of each class for training, the rest for testing.
    FinetuneStratified,
    /// The whole dataset goes to one side of a train-on-A, test-on-B run.
    CrossDataset(CrossRole),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossRole {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub label_rate: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn stratified(label_rate: f64, seed: u64) -> Self {
        Self {
            mode: SplitMode::FinetuneStratified,
            label_rate,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class training count: nearest integer with a floor of one.
pub fn stratum_size(count: usize, label_rate: f64) -> usize {
    ((label_rate * count as f64).round() as usize).clamp(1, count)
}

pub fn make_splits(labels: &[usize], num_classes: usize, spec: &SplitSpec) -> Result<Split> {
    if !(spec.label_rate > 0.0 && spec.label_rate <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "label_rate {} outside (0, 1]",
            spec.label_rate
        )));
    }
    let n = labels.len();
    match spec.mode {
        SplitMode::Pretrain => {
            let (train, val, test) = pretrain_split(n, spec.seed);
            Ok(Split { train, val, test })
        }
        SplitMode::CrossDataset(CrossRole::Train) => Ok(Split {
            train: (0..n).collect(),
            ..Split::default()
        }),
        SplitMode::CrossDataset(CrossRole::Test) => Ok(Split {
            test: (0..n).collect(),
            ..Split::default()
        }),
        SplitMode::FinetuneStratified => {
            let mut rng = seed::rng(spec.seed, &[stream::SPLIT]);
            let mut split = Split::default();
            for class in 0..num_classes {
                let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
                if members.is_empty() {
                    return Err(Error::Stratification(format!("class {class} has no samples")));
                }
                members.shuffle(&mut rng);
                let take = stratum_size(members.len(), spec.label_rate);
                split.test.extend_from_slice(&members[take..]);
                members.truncate(take);
                split.train.extend(members);
            }
            if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::InvalidInput(format!("label {y} outside [0, {num_classes})")));
            }
            split.train.sort_unstable();
            split.test.sort_unstable();
            Ok(split)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn twelve_balanced_classes_at_ten_percent() {
        let labels: Vec<usize> = (0..1200).map(|i| i % 12).collect();
        let s = make_splits(&labels, 12, &SplitSpec::stratified(0.1, 3)).unwrap();
        assert_eq!(s.train.len(), 120);
        for c in 0..12 {
            assert_eq!(s.train.iter().filter(|&&i| labels[i] == c).count(), 10);
        }
        assert_eq!(s.test.len(), 1080);
    }

    #[test]
    fn full_label_rate_uses_everything() {
        let labels = vec![0, 1, 1, 2, 0];
        let s = make_splits(&labels, 3, &SplitSpec::stratified(1.0, 0)).unwrap();
        assert_eq!(s.train, vec![0, 1, 2, 3, 4]);
        assert!(s.test.is_empty());
    }

    #[test]
    fn absent_class_fails() {
        assert!(matches!(
            make_splits(&[0, 0, 2], 3, &SplitSpec::stratified(0.5, 0)),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn pretrain_mode_is_eighty_ten_ten() {
        let spec = SplitSpec {
            mode: SplitMode::Pretrain,
            label_rate: 1.0,
            seed: 9,
        };
        let s = make_splits(&[0; 600], 1, &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (480, 60, 60));
        assert_eq!(s, make_splits(&[0; 600], 1, &spec).unwrap());
    }

    proptest! {
        #[test]
        fn splits_are_disjoint_exhaustive_and_proportional(
            labels in proptest::collection::vec(0usize..5, 5..200),
            rate in 0.05f64..1.0,
            seed in 0u64..100,
            pretrain in any::<bool>(),
        ) {
            let k = 5;
            let mode = if pretrain { SplitMode::Pretrain } else { SplitMode::FinetuneStratified };
            let spec = SplitSpec { mode, label_rate: rate, seed };
            let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
            let result = make_splits(&labels, k, &spec);
            if !pretrain && present.len() < k {
                prop_assert!(result.is_err());
                return Ok(());
            }
            let s = result.unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            if !pretrain {
                for c in 0..k {
                    let total = labels.iter().filter(|&&y| y == c).count();
                    let got = s.train.iter().filter(|&&i| labels[i] == c).count();
                    prop_assert!(got >= 1);
                    prop_assert!((got as f64 - rate * total as f64).abs() <= 1.0);
                }
            }
        }
    }
}
