//! Pretraining mask plans. The focused strategy spends most of the masking
//! budget on nucleus timesteps as contiguous spans; the random strategy is
//! the uniform baseline used for ablation.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{ImuWindow, NucleusMask, Sample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    #[default]
    Focused,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub mask_ratio: f64,
    pub nucleus_share: f64,
    pub span_min: usize,
    pub span_max: usize,
    pub strategy: MaskStrategy,
    pub rng_seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_ratio: 0.15,
            nucleus_share: 0.8,
            span_min: 4,
            span_max: 5,
            strategy: MaskStrategy::Focused,
            rng_seed: 0,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask_ratio {} outside (0, 1)",
                self.mask_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.nucleus_share) {
            return Err(Error::InvalidConfig(format!(
                "nucleus_share {} outside [0, 1]",
                self.nucleus_share
            )));
        }
        if self.span_min < 1 || self.span_min > self.span_max {
            return Err(Error::InvalidConfig(format!(
                "span range [{}, {}]",
                self.span_min, self.span_max
            )));
        }
        Ok(())
    }

    pub fn with_seed(self, rng_seed: u64) -> Self {
        Self { rng_seed, ..self }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    pub in_nucleus_count: usize,
    pub out_nucleus_count: usize,
    /// Maximal runs of consecutive masked timesteps.
    pub spans: Vec<(usize, usize)>,
}

impl MaskPlan {
    pub fn total(&self) -> usize {
        self.in_nucleus_count + self.out_nucleus_count
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.masked
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(t, _)| t)
    }

    /// Plan from an explicit set of masked steps.
    pub fn from_masked(masked: Vec<bool>, nucleus: &NucleusMask) -> Self {
        let in_nucleus_count = masked
            .iter()
            .zip(&nucleus.in_nucleus)
            .filter(|(&m, &n)| m && n)
            .count();
        let total = masked.iter().filter(|&&m| m).count();
        let spans = runs(&masked);
        Self {
            masked,
            in_nucleus_count,
            out_nucleus_count: total - in_nucleus_count,
            spans,
        }
    }
}

fn runs(flags: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &f) in flags.iter().enumerate() {
        match (f, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, flags.len()));
    }
    out
}

/// Masked-step count for a window with `valid` unpadded steps.
pub fn mask_budget(valid: usize, ratio: f64) -> usize {
    (ratio * valid as f64).round() as usize
}

pub fn plan_masks(n: &NucleusMask, pad_mask: &[bool], cfg: &MaskConfig) -> Result<MaskPlan> {
    cfg.validate()?;
    if n.in_nucleus.len() != pad_mask.len() {
        return Err(Error::InvalidInput(format!(
            "nucleus length {} vs pad mask {}",
            n.in_nucleus.len(),
            pad_mask.len()
        )));
    }
    let valid = pad_mask.iter().filter(|&&p| !p).count();
    let budget = mask_budget(valid, cfg.mask_ratio);
    if budget > valid {
        return Err(Error::InvalidConfig(format!(
            "mask budget {budget} exceeds {valid} unpadded steps"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let masked = match cfg.strategy {
        MaskStrategy::Focused => focused(n, pad_mask, cfg, budget, &mut rng),
        MaskStrategy::Random => {
            let pool: Vec<usize> = (0..pad_mask.len()).filter(|&t| !pad_mask[t]).collect();
            let mut masked = vec![false; pad_mask.len()];
            for i in sample(&mut rng, pool.len(), budget) {
                masked[pool[i]] = true;
            }
            masked
        }
    };
    Ok(MaskPlan::from_masked(masked, n))
}

fn focused(
    n: &NucleusMask,
    pad_mask: &[bool],
    cfg: &MaskConfig,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    let len = pad_mask.len();
    let nucleus: Vec<bool> = (0..len).map(|t| n.in_nucleus[t] && !pad_mask[t]).collect();
    let nucleus_size = nucleus.iter().filter(|&&v| v).count();
    let mut masked = vec![false; len];
    if nucleus_size == 0 && budget > 0 {
        log::debug!("empty nucleus: placing all {budget} masked steps outside");
    }
    let nucleus_budget = ((cfg.nucleus_share * budget as f64).round() as usize).min(nucleus_size);
    place_spans(&nucleus, &mut masked, nucleus_budget, cfg, rng);

    let outside: Vec<usize> = (0..len).filter(|&t| !pad_mask[t] && !nucleus[t]).collect();
    let mut remaining = budget - nucleus_budget;
    let take = remaining.min(outside.len());
    for i in sample(rng, outside.len(), take) {
        masked[outside[i]] = true;
    }
    remaining -= take;
    if remaining > 0 {
        // Nucleus covers nearly the whole window; the overflow goes back inside.
        let free: Vec<usize> = (0..len).filter(|&t| nucleus[t] && !masked[t]).collect();
        for i in sample(rng, free.len(), remaining) {
            masked[free[i]] = true;
        }
    }
    masked
}

/// Non-overlapping spans inside `allowed` with lengths drawn uniformly from
/// `[span_min, span_max]`. The last span is truncated to the remaining budget
/// and preferably placed flush against an existing span.
fn place_spans(
    allowed: &[bool],
    masked: &mut [bool],
    budget: usize,
    cfg: &MaskConfig,
    rng: &mut ChaCha8Rng,
) {
    let len = allowed.len();
    let free = |masked: &[bool], s: usize, l: usize| {
        s + l <= len && (s..s + l).all(|t| allowed[t] && !masked[t])
    };
    let mut remaining = budget;
    while remaining > 0 {
        let drawn = rng.random_range(cfg.span_min..=cfg.span_max);
        let truncated = drawn > remaining;
        let mut span = drawn.min(remaining);
        loop {
            let starts: Vec<usize> = (0..len).filter(|&s| free(masked, s, span)).collect();
            let chosen = if truncated {
                let flush: Vec<usize> = starts
                    .iter()
                    .copied()
                    .filter(|&s| (s > 0 && masked[s - 1]) || (s + span < len && masked[s + span]))
                    .collect();
                if flush.is_empty() {
                    starts
                } else {
                    flush
                }
            } else {
                starts
            };
            if !chosen.is_empty() {
                let s = chosen[rng.random_range(0..chosen.len())];
                masked[s..s + span].iter_mut().for_each(|m| *m = true);
                remaining -= span;
                break;
            }
            // Fragmented nucleus: fall back to shorter pieces.
            span -= 1;
            assert!(span > 0, "budget never exceeds free nucleus steps");
        }
    }
}

/// A window with masked steps zeroed plus the original values there.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedWindow {
    pub window: ImuWindow,
    pub indices: Vec<usize>,
    pub targets: Vec<Sample>,
}

pub fn apply_masks(w: &ImuWindow, plan: &MaskPlan) -> Result<MaskedWindow> {
    if plan.masked.len() != w.len() {
        return Err(Error::InvalidInput(format!(
            "plan length {} vs window {}",
            plan.masked.len(),
            w.len()
        )));
    }
    let mut window = w.clone();
    let mut indices = Vec::new();
    let mut targets = Vec::new();
    for t in plan.indices() {
        indices.push(t);
        targets.push(w.samples()[t]);
        if !w.is_padded(t) {
            window.set_sample(t, [0.0; 6]);
        }
    }
    Ok(MaskedWindow {
        window,
        indices,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nucleus(len: usize, regions: &[(usize, usize)]) -> NucleusMask {
        NucleusMask::from_regions(len, regions.to_vec())
    }

    #[test]
    fn budget_split_with_thirty_step_nucleus() {
        let n = nucleus(120, &[(40, 70)]);
        let plan = plan_masks(&n, &[false; 120], &MaskConfig::default()).unwrap();
        assert_eq!(plan.total(), 18);
        assert_eq!(plan.in_nucleus_count, 14);
        assert_eq!(plan.out_nucleus_count, 4);
    }

    #[test]
    fn empty_nucleus_masks_outside_only() {
        let plan = plan_masks(&NucleusMask::empty(120), &[false; 120], &MaskConfig::default()).unwrap();
        assert_eq!(plan.total(), 18);
        assert_eq!(plan.in_nucleus_count, 0);
    }

    #[test]
    fn small_nucleus_caps_inside_budget() {
        let n = nucleus(120, &[(10, 15)]);
        let plan = plan_masks(&n, &[false; 120], &MaskConfig::default()).unwrap();
        assert_eq!(plan.in_nucleus_count, 5);
        assert_eq!(plan.out_nucleus_count, 13);
    }

    #[test]
    fn whole_window_nucleus_keeps_exact_budget() {
        let n = nucleus(120, &[(0, 120)]);
        let plan = plan_masks(&n, &[false; 120], &MaskConfig::default()).unwrap();
        assert_eq!(plan.total(), 18);
        assert_eq!(plan.in_nucleus_count, 18);
    }

    #[test]
    fn padding_is_never_masked() {
        let pad: Vec<bool> = (0..120).map(|t| t < 30 || t >= 90).collect();
        let n = nucleus(120, &[(50, 62)]);
        for seed in 0..50 {
            let plan = plan_masks(&n, &pad, &MaskConfig::default().with_seed(seed)).unwrap();
            assert_eq!(plan.total(), 9);
            assert!(plan.indices().all(|t| !pad[t]));
        }
    }

    #[test]
    fn invalid_configs() {
        let n = NucleusMask::empty(10);
        for cfg in [
            MaskConfig { mask_ratio: 1.0, ..MaskConfig::default() },
            MaskConfig { mask_ratio: 0.0, ..MaskConfig::default() },
            MaskConfig { span_min: 6, ..MaskConfig::default() },
            MaskConfig { nucleus_share: 1.5, ..MaskConfig::default() },
        ] {
            assert!(matches!(plan_masks(&n, &[false; 10], &cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn random_strategy_ignores_nucleus() {
        let n = nucleus(120, &[(40, 70)]);
        let cfg = MaskConfig {
            strategy: MaskStrategy::Random,
            ..MaskConfig::default()
        };
        let mut inside = 0;
        for seed in 0..2000 {
            let plan = plan_masks(&n, &[false; 120], &cfg.with_seed(seed)).unwrap();
            assert_eq!(plan.total(), 18);
            inside += plan.in_nucleus_count;
        }
        // expected share 30 / 120
        let share = inside as f64 / (2000.0 * 18.0);
        assert!((share - 0.25).abs() < 0.01, "{share}");
    }

    #[test]
    fn apply_masks_examples() {
        let mut w = ImuWindow::zeros(12);
        for t in 0..12 {
            w.set_sample(t, [t as f32 + 1.0; 6]);
        }
        let empty = MaskPlan::from_masked(vec![false; 12], &NucleusMask::empty(12));
        let m = apply_masks(&w, &empty).unwrap();
        assert_eq!(m.window, w);
        assert!(m.targets.is_empty());

        let full = MaskPlan::from_masked(vec![true; 12], &NucleusMask::empty(12));
        let m = apply_masks(&w, &full).unwrap();
        assert!(m.window.samples().iter().flatten().all(|&v| v == 0.0));
        assert_eq!(m.targets, w.samples().to_vec());
    }

    proptest! {
        #[test]
        fn same_seed_same_plan(seed in any::<u64>(), start in 0usize..80, width in 0usize..40) {
            let n = nucleus(120, &[(start, start + width)]);
            let cfg = MaskConfig::default().with_seed(seed);
            prop_assert_eq!(plan_masks(&n, &[false; 120], &cfg).unwrap(), plan_masks(&n, &[false; 120], &cfg).unwrap());
        }

        #[test]
        fn plan_invariants(seed in any::<u64>(), start in 0usize..80, width in 1usize..40, pad in 0usize..20) {
            let pad_mask: Vec<bool> = (0..120).map(|t| t < pad || t >= 120 - pad).collect();
            let lo = start.max(pad);
            let hi = (start + width).min(120 - pad).max(lo);
            let n = nucleus(120, &[(lo, hi)]);
            let cfg = MaskConfig::default().with_seed(seed);
            let plan = plan_masks(&n, &pad_mask, &cfg).unwrap();
            let valid = 120 - 2 * pad;
            prop_assert_eq!(plan.total(), mask_budget(valid, 0.15));
            prop_assert_eq!(plan.in_nucleus_count + plan.out_nucleus_count, plan.masked.iter().filter(|&&m| m).count());
            prop_assert!(plan.indices().all(|t| !pad_mask[t]));
            // in-nucleus masked steps sit in runs of at least min(span_min, inside budget)
            let inside_budget = plan.in_nucleus_count;
            let floor = cfg.span_min.min(inside_budget);
            let inside: Vec<bool> = (0..120).map(|t| plan.masked[t] && n.in_nucleus[t]).collect();
            for (s, e) in runs(&inside) {
                prop_assert!(e - s >= floor, "run {s}..{e} shorter than {floor}");
            }
        }

        #[test]
        fn unmasked_steps_are_untouched(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut w = ImuWindow::zeros(120);
            for t in 0..120 {
                w.set_sample(t, std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
            }
            let n = nucleus(120, &[(30, 60)]);
            let plan = plan_masks(&n, w.pad_mask(), &MaskConfig::default().with_seed(seed)).unwrap();
            let m = apply_masks(&w, &plan).unwrap();
            for t in 0..120 {
                if plan.masked[t] {
                    prop_assert_eq!(m.window.samples()[t], [0.0; 6]);
                } else {
                    prop_assert_eq!(m.window.samples()[t].map(f32::to_bits), w.samples()[t].map(f32::to_bits));
                }
            }
            prop_assert_eq!(m.targets.len(), 18);
        }
    }
}
