use gradtape::Scalar;

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::signal::{ImuWindow, Sample, CHANNELS};

/// Squared reconstruction error over the masked timesteps, averaged over
/// masked elements (timesteps × channels).
pub fn pretrain_loss(recon: &[Sample], target: &ImuWindow, plan: &MaskPlan) -> Result<f64> {
    if recon.len() != target.len() || plan.masked.len() != target.len() {
        return Err(Error::InvalidInput(format!(
            "reconstruction of {} steps, target of {}, plan of {}",
            recon.len(),
            target.len(),
            plan.masked.len()
        )));
    }
    let flat_recon: Vec<f32> = recon.iter().flatten().copied().collect();
    let flat_target: Vec<f32> = target.samples().iter().flatten().copied().collect();
    let (loss, _) = masked_mse_with_grad::<f64>(
        &flat_recon.iter().map(|&v| f64::from(v)).collect::<Vec<_>>(),
        &flat_target,
        &plan.masked,
    )?;
    Ok(loss)
}

/// Mean squared error over the channels of every row with `masked[row]` set,
/// and its gradient with respect to `recon` (zero on unmasked rows).
pub fn masked_mse_with_grad<S: Scalar>(
    recon: &[S],
    target: &[f32],
    masked: &[bool],
) -> Result<(f64, Vec<S>)> {
    assert_eq!(recon.len(), masked.len() * CHANNELS);
    assert_eq!(target.len(), recon.len());
    let count = masked.iter().filter(|&&m| m).count() * CHANNELS;
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = 1.0 / count as f64;
    let mut grad = vec![S::zero(); recon.len()];
    let mut sum = 0.0;
    for (row, _) in masked.iter().enumerate().filter(|(_, &m)| m) {
        for c in row * CHANNELS..(row + 1) * CHANNELS {
            let diff = recon[c].as_f64() - f64::from(target[c]);
            sum += diff * diff;
            grad[c] = S::of(2.0 * diff * scale);
        }
    }
    Ok((sum * scale, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::NucleusMask;
    use rand::{Rng, SeedableRng};

    fn plan_with(count: usize, len: usize) -> MaskPlan {
        let masked = (0..len).map(|t| t < count).collect();
        MaskPlan::from_masked(masked, &NucleusMask::empty(len))
    }

    fn random_window(rng: &mut rand_chacha::ChaCha8Rng, len: usize) -> ImuWindow {
        let samples = (0..len)
            .map(|_| std::array::from_fn(|_| rng.random_range(-2.0f32..2.0)))
            .collect();
        ImuWindow::unpadded(samples).unwrap()
    }

    #[test]
    fn perfect_reconstruction_is_zero() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let w = random_window(&mut rng, 120);
        let loss = pretrain_loss(w.samples(), &w, &plan_with(18, 120)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn unit_offset_gives_one() {
        let w = ImuWindow::zeros(120);
        let recon = vec![[1.0f32; CHANNELS]; 120];
        let loss = pretrain_loss(&recon, &w, &plan_with(18, 120)).unwrap();
        assert!((loss - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_plan_is_an_error() {
        let w = ImuWindow::zeros(12);
        assert!(matches!(
            pretrain_loss(w.samples(), &w, &plan_with(0, 12)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn matches_scalar_loop_and_ignores_unmasked_rows() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let target = random_window(&mut rng, 120);
        let recon = random_window(&mut rng, 120);
        let masked: Vec<bool> = (0..120).map(|_| rng.random_bool(0.2)).collect();
        let plan = MaskPlan::from_masked(masked.clone(), &NucleusMask::empty(120));

        let mut sum = 0.0;
        let mut n = 0;
        for t in 0..120 {
            if masked[t] {
                for c in 0..CHANNELS {
                    let d = f64::from(recon.samples()[t][c]) - f64::from(target.samples()[t][c]);
                    sum += d * d;
                    n += 1;
                }
            }
        }
        let loss = pretrain_loss(recon.samples(), &target, &plan).unwrap();
        assert!((loss - sum / n as f64).abs() < 1e-12);

        let flat: Vec<f64> = recon.samples().iter().flatten().map(|&v| f64::from(v)).collect();
        let tgt: Vec<f32> = target.samples().iter().flatten().copied().collect();
        let (_, grad) = masked_mse_with_grad(&flat, &tgt, &masked).unwrap();
        for t in (0..120).filter(|&t| !masked[t]) {
            assert!(grad[t * CHANNELS..(t + 1) * CHANNELS].iter().all(|&g| g == 0.0));
        }
    }
}
