//! The three fine-tuning losses, each returning its value and the gradient
//! with respect to its input matrix. Inputs are row-major `[B × dim]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::SemanticTable;

fn check_labels(labels: &[usize], k: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= k) {
        Some(y) => Err(Error::InvalidInput(format!("label {y} outside [0, {k})"))),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `logits` `[B × k]`.
pub fn classification_loss(logits: &[f64], k: usize, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    assert_eq!(logits.len(), labels.len() * k);
    check_labels(labels, k)?;
    if labels.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let b = labels.len() as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[y];
        for c in 0..k {
            let p = (row[c] - lse).exp();
            grad[i * k + c] = (p - f64::from(u8::from(c == y))) / b;
        }
    }
    Ok((total / b, grad))
}

/// Hinge on Euclidean feature distance with class-pair margins and weights,
/// averaged over ordered pairs with different labels. Zero when no such pair
/// exists.
pub fn semantic_loss(f: &[f64], dim: usize, labels: &[usize], table: &SemanticTable) -> Result<(f64, Vec<f64>)> {
    assert_eq!(f.len(), labels.len() * dim);
    check_labels(labels, table.num_classes())?;
    let n = labels.len();
    let mut grad = vec![0.0; f.len()];
    let mut total = 0.0;
    let mut pairs = 0usize;
    let mut diff = vec![0.0; dim];
    for i in 0..n {
        for j in 0..n {
            let (yi, yj) = (labels[i], labels[j]);
            if i == j || yi == yj {
                continue;
            }
            pairs += 1;
            let (m, w) = (table.margin[yi][yj], table.weight[yi][yj]);
            for (k, d) in diff.iter_mut().enumerate() {
                *d = f[i * dim + k] - f[j * dim + k];
            }
            let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
            if dist >= m || w == 0.0 {
                continue;
            }
            total += w * (m - dist);
            if dist > 0.0 {
                for (k, d) in diff.iter().enumerate() {
                    let g = w * d / dist;
                    grad[i * dim + k] -= g;
                    grad[j * dim + k] += g;
                }
            }
        }
    }
    if pairs == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / pairs as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, grad))
}

/// Supervised contrastive loss over L2-normalized `z`: each anchor averages
/// the log-probability of its same-class partners against all other samples,
/// and the loss is the mean over anchors that have a partner.
pub fn contrastive_loss(z: &[f64], dim: usize, labels: &[usize], tau: f64) -> Result<(f64, Vec<f64>)> {
    assert_eq!(z.len(), labels.len() * dim);
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("tau {tau}")));
    }
    let n = labels.len();
    let dot = |i: usize, j: usize| -> f64 {
        (0..dim).map(|k| z[i * dim + k] * z[j * dim + k]).sum()
    };
    let sim: Vec<f64> = (0..n * n).map(|ij| dot(ij / n, ij % n) / tau).collect();
    let anchors: Vec<usize> = (0..n)
        .filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let a = anchors.len() as f64;
    // d loss / d sim[i][j], then chain through sim = z_i . z_j / tau.
    let mut dsim = vec![0.0; n * n];
    let mut total = 0.0;
    for &i in &anchors {
        let row = &sim[i * n..(i + 1) * n];
        let max = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..n).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
        let lse = max + sum.ln();
        let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let p = positives.len() as f64;
        total += positives.iter().map(|&j| lse - row[j]).sum::<f64>() / p;
        for j in (0..n).filter(|&j| j != i) {
            dsim[i * n + j] += (row[j] - lse).exp() / a;
        }
        for &j in &positives {
            dsim[i * n + j] -= 1.0 / (p * a);
        }
    }
    let mut grad = vec![0.0; z.len()];
    for i in 0..n {
        for j in 0..n {
            let g = dsim[i * n + j] / tau;
            if g == 0.0 {
                continue;
            }
            for k in 0..dim {
                grad[i * dim + k] += g * z[j * dim + k];
                grad[j * dim + k] += g * z[i * dim + k];
            }
        }
    }
    Ok((total / a, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_s: f64,
    pub w_c: f64,
}

/// Linear per-epoch ramp of the auxiliary loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSchedule {
    pub start: f64,
    pub semantic_max: f64,
    pub contrastive_max: f64,
}

impl Default for LossSchedule {
    fn default() -> Self {
        Self {
            start: 0.1,
            semantic_max: 0.3,
            contrastive_max: 0.5,
        }
    }
}

impl LossSchedule {
    /// Weights at `epoch` of an `epochs`-long run: the start value at epoch 0
    /// and the maxima at the last epoch.
    pub fn weights(&self, epoch: usize, epochs: usize) -> LossWeights {
        let frac = if epochs <= 1 {
            1.0
        } else {
            (epoch.min(epochs - 1)) as f64 / (epochs - 1) as f64
        };
        let ramp = |max: f64| self.start + (max - self.start) * frac;
        LossWeights {
            w_s: ramp(self.semantic_max),
            w_c: ramp(self.contrastive_max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub classification: f64,
    pub semantic: f64,
    pub contrastive: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.classification + w.w_s * c.semantic + w.w_c * c.contrastive
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::derive_margins_weights;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(k: usize, rng: &mut ChaCha8Rng) -> SemanticTable {
        let vecs = (0..k)
            .map(|_| {
                let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        derive_margins_weights(vecs, "test", &Default::default()).unwrap()
    }

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f64> {
        let mut z: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for row in z.chunks_mut(dim) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        z
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let (l, _) = classification_loss(&[0.0; 24], 12, &[3, 7]).unwrap();
        assert!((l - 12f64.ln()).abs() < 1e-12);
        let (l, _) = classification_loss(&[50.0, 0.0, 0.0], 3, &[0]).unwrap();
        assert!(l < 1e-20);
        assert!(matches!(
            classification_loss(&[0.0; 3], 3, &[3]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn semantic_two_sample_arithmetic() {
        let mut t = derive_margins_weights(vec![vec![1.0, 0.0], vec![0.0, 1.0]], "t", &Default::default()).unwrap();
        t.margin[0][1] = 1.0;
        t.margin[1][0] = 1.0;
        t.weight[0][1] = 0.5;
        t.weight[1][0] = 0.5;
        let (l, _) = semantic_loss(&[0.0, 0.0, 0.3, 0.4], 2, &[0, 1], &t).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
        let (l, g) = semantic_loss(&[0.0, 0.0, 3.0, 4.0], 2, &[0, 1], &t).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contrastive_identical_pair_is_zero() {
        let (l, _) = contrastive_loss(&[0.6, 0.8, 0.6, 0.8], 2, &[1, 1], 0.1).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(matches!(
            contrastive_loss(&[1.0, 0.0, 0.0, 1.0], 2, &[0, 1], 0.1),
            Err(Error::DegenerateBatch)
        ));
        // Positives aligned, negatives opposite: vanishes as tau shrinks.
        let z = [1.0, 0.0, 1.0, 0.0, -1.0, 0.0, -1.0, 0.0];
        let (l, _) = contrastive_loss(&z, 2, &[0, 0, 1, 1], 0.01).unwrap();
        assert!(l < 1e-50);
    }

    #[test]
    fn schedule_endpoints_and_total() {
        let s = LossSchedule::default();
        assert_eq!(s.weights(0, 200), LossWeights { w_s: 0.1, w_c: 0.1 });
        let last = s.weights(199, 200);
        assert!((last.w_s - 0.3).abs() < 1e-15 && (last.w_c - 0.5).abs() < 1e-15);
        let c = LossComponents {
            classification: 2.0,
            semantic: 1.0,
            contrastive: 1.0,
        };
        assert!((total_loss(&c, &last) - 2.8).abs() < 1e-12);
        let mut prev = s.weights(0, 200);
        for e in 1..200 {
            let w = s.weights(e, 200);
            assert!(w.w_s >= prev.w_s && w.w_c >= prev.w_c);
            prev = w;
        }
    }

    /// Central differences with the given step, compared at relative 1e-3.
    fn check_grad(x: &[f64], analytic: &[f64], step: f64, f: impl Fn(&[f64]) -> f64) {
        for i in 0..x.len() {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += step;
            m[i] -= step;
            let numeric = (f(&p) - f(&m)) / (2.0 * step);
            let scale = numeric.abs().max(analytic[i].abs()).max(1e-3);
            assert!(
                (numeric - analytic[i]).abs() / scale < 1e-3,
                "component {i}: analytic {} numeric {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let labels = [0, 1, 2, 1, 0, 2, 2];
        let logits: Vec<f64> = (0..7 * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = classification_loss(&logits, 3, &labels).unwrap();
        check_grad(&logits, &g, 1e-3, |x| classification_loss(x, 3, &labels).unwrap().0);

        let t = table(3, &mut rng);
        let f: Vec<f64> = (0..7 * 4).map(|_| rng.random_range(-0.3..0.3)).collect();
        let (l, g) = semantic_loss(&f, 4, &labels, &t).unwrap();
        assert!(l > 0.0);
        check_grad(&f, &g, 1e-3, |x| semantic_loss(x, 4, &labels, &t).unwrap().0);

        let z = unit_rows(&mut rng, 7, 4);
        let (_, g) = contrastive_loss(&z, 4, &labels, 0.5).unwrap();
        check_grad(&z, &g, 1e-3, |x| contrastive_loss(x, 4, &labels, 0.5).unwrap().0);
    }

    fn brute_contrastive(z: &[f64], dim: usize, labels: &[usize], tau: f64) -> f64 {
        let n = labels.len();
        let s = |i: usize, j: usize| (0..dim).map(|k| z[i * dim + k] * z[j * dim + k]).sum::<f64>() / tau;
        let mut total = 0.0;
        let mut anchors = 0;
        for i in 0..n {
            let mut denom = 0.0;
            for j in 0..n {
                if j != i {
                    denom += s(i, j).exp();
                }
            }
            let mut acc = 0.0;
            let mut count = 0;
            for p in 0..n {
                if p != i && labels[p] == labels[i] {
                    acc += -(s(i, p).exp() / denom).ln();
                    count += 1;
                }
            }
            if count > 0 {
                total += acc / count as f64;
                anchors += 1;
            }
        }
        total / anchors as f64
    }

    fn brute_semantic(f: &[f64], dim: usize, labels: &[usize], t: &SemanticTable) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0;
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if i != j && labels[i] != labels[j] {
                    let mut d2 = 0.0;
                    for k in 0..dim {
                        d2 += (f[i * dim + k] - f[j * dim + k]).powi(2);
                    }
                    let (yi, yj) = (labels[i], labels[j]);
                    total += t.weight[yi][yj] * (t.margin[yi][yj] - d2.sqrt()).max(0.0);
                    pairs += 1;
                }
            }
        }
        total / pairs as f64
    }

    #[test]
    fn random_batches_match_double_loop_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let labels = [0, 1, 2, 0, 1, 2, 0, 1];
        for _ in 0..20 {
            let z = unit_rows(&mut rng, 8, 6);
            let got = contrastive_loss(&z, 6, &labels, 0.1).unwrap().0;
            let want = brute_contrastive(&z, 6, &labels, 0.1);
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0));

            let t = table(3, &mut rng);
            let f: Vec<f64> = (0..8 * 6).map(|_| rng.random_range(-0.4..0.4)).collect();
            let got = semantic_loss(&f, 6, &labels, &t).unwrap().0;
            let want = brute_semantic(&f, 6, &labels, &t);
            assert!((got - want).abs() <= 1e-6 * want.abs().max(1e-12));
        }
    }

    proptest! {
        #[test]
        fn contrastive_is_rotation_invariant(seed in 0u64..1000, angle in 0.0f64..std::f64::consts::TAU) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = [0, 0, 1, 1, 2];
            let z = unit_rows(&mut rng, 5, 3);
            let (c, s) = (angle.cos(), angle.sin());
            let rotated: Vec<f64> = z
                .chunks(3)
                .flat_map(|r| [c * r[0] - s * r[1], s * r[0] + c * r[1], r[2]])
                .collect();
            let a = contrastive_loss(&z, 3, &labels, 0.2).unwrap().0;
            let b = contrastive_loss(&rotated, 3, &labels, 0.2).unwrap().0;
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn semantic_is_translation_invariant(seed in 0u64..1000, shift in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels = [0, 1, 2, 1, 3];
            let t = table(4, &mut rng);
            let f: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-0.5..0.5)).collect();
            let moved: Vec<f64> = f.iter().enumerate().map(|(i, v)| v + shift[i % 4]).collect();
            let a = semantic_loss(&f, 4, &labels, &t).unwrap().0;
            let b = semantic_loss(&moved, 4, &labels, &t).unwrap().0;
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a >= 0.0);
        }
    }
}
