//! Canonical windows, the energy profile, nucleus detection and the
//! significant gyroscope axis.

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WINDOW_LEN: usize = 120;
pub const CHANNELS: usize = 6;
pub const SAMPLE_RATE_HZ: f64 = 20.0;

/// Channel order: acc_x, acc_y, acc_z, gyro_x, gyro_y, gyro_z.
pub type Sample = [f32; CHANNELS];

/// Fixed-length 6-axis window. Padded timesteps are all-zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ImuWindow {
    samples: Vec<Sample>,
    pad_mask: Vec<bool>,
}

impl ImuWindow {
    pub fn new(samples: Vec<Sample>, pad_mask: Vec<bool>) -> Result<Self> {
        if samples.len() != pad_mask.len() {
            return Err(Error::InvalidInput(format!(
                "{} samples but {} pad flags",
                samples.len(),
                pad_mask.len()
            )));
        }
        if let Some(t) = samples
            .iter()
            .zip(&pad_mask)
            .position(|(s, &p)| p && s.iter().any(|&v| v != 0.0))
        {
            return Err(Error::InvalidInput(format!(
                "padded timestep {t} is not zero"
            )));
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite sample value".into()));
        }
        Ok(Self { samples, pad_mask })
    }

    /// Window without padding.
    pub fn unpadded(samples: Vec<Sample>) -> Result<Self> {
        let n = samples.len();
        Self::new(samples, vec![false; n])
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![[0.0; CHANNELS]; len],
            pad_mask: vec![false; len],
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn pad_mask(&self) -> &[bool] {
        &self.pad_mask
    }

    pub fn valid_count(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| !p).count()
    }

    pub fn is_padded(&self, t: usize) -> bool {
        self.pad_mask[t]
    }

    /// Replace the sample at unpadded timestep `t`.
    pub fn set_sample(&mut self, t: usize, value: Sample) {
        assert!(!self.pad_mask[t], "cannot write into padding");
        self.samples[t] = value;
    }

    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            samples: self
                .samples
                .iter()
                .map(|s| s.map(|v| v * factor))
                .collect(),
            pad_mask: self.pad_mask.clone(),
        }
    }
}

/// One timestamped sample of a raw recording, in canonical channel order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawSample {
    pub t: f64,
    pub values: [f64; CHANNELS],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_len: usize,
    pub target_rate_hz: f64,
    /// Per-window per-channel z-score over the unpadded region.
    pub normalize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_len: WINDOW_LEN,
            target_rate_hz: SAMPLE_RATE_HZ,
            normalize: true,
        }
    }
}

/// Resample, z-score and symmetrically zero-pad a recording into one window.
pub fn preprocess(raw: &[RawSample], target_len: usize) -> Result<ImuWindow> {
    preprocess_with(
        raw,
        &PreprocessConfig {
            target_len,
            ..PreprocessConfig::default()
        },
    )
}

pub fn preprocess_with(raw: &[RawSample], cfg: &PreprocessConfig) -> Result<ImuWindow> {
    let mut resampled = resample_linear(raw, cfg.target_rate_hz)?;
    if resampled.len() > cfg.target_len {
        let start = (resampled.len() - cfg.target_len) / 2;
        resampled = resampled[start..start + cfg.target_len].to_vec();
    }
    Ok(finish_window(&resampled, cfg))
}

/// Normalizes (optionally) and pads an already-resampled segment of at most
/// `cfg.target_len` samples.
pub fn finish_window(segment: &[[f64; CHANNELS]], cfg: &PreprocessConfig) -> ImuWindow {
    assert!(segment.len() <= cfg.target_len, "segment longer than window");
    let values = if cfg.normalize {
        zscore_channels(segment)
    } else {
        segment.to_vec()
    };
    let pad_total = cfg.target_len - segment.len();
    let lead = pad_total / 2;
    let mut samples = vec![[0.0f32; CHANNELS]; cfg.target_len];
    let mut pad_mask = vec![true; cfg.target_len];
    for (i, v) in values.iter().enumerate() {
        samples[lead + i] = v.map(|x| x as f32);
        pad_mask[lead + i] = false;
    }
    ImuWindow { samples, pad_mask }
}

/// Linear-interpolation resampling onto a uniform grid starting at the first
/// timestamp. The grid stops at the last sample that does not extrapolate.
pub fn resample_linear(raw: &[RawSample], rate_hz: f64) -> Result<Vec<[f64; CHANNELS]>> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("empty stream".into()));
    }
    if !(rate_hz > 0.0) {
        return Err(Error::InvalidConfig(format!("sample rate {rate_hz}")));
    }
    if let Some(i) = raw.windows(2).position(|w| !(w[1].t > w[0].t)) {
        return Err(Error::InvalidInput(format!(
            "timestamps not strictly increasing at sample {}",
            i + 1
        )));
    }
    if raw.iter().any(|s| !s.t.is_finite() || s.values.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidInput("non-finite value in stream".into()));
    }
    let t0 = raw[0].t;
    let span = raw[raw.len() - 1].t - t0;
    let count = (span * rate_hz + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(count);
    let mut j = 0;
    for i in 0..count {
        let t = t0 + i as f64 / rate_hz;
        while j + 1 < raw.len() && raw[j + 1].t <= t {
            j += 1;
        }
        if j + 1 == raw.len() || raw[j].t >= t {
            out.push(raw[j].values);
            continue;
        }
        let (a, b) = (&raw[j], &raw[j + 1]);
        let frac = (t - a.t) / (b.t - a.t);
        let mut v = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            v[c] = a.values[c] + frac * (b.values[c] - a.values[c]);
        }
        out.push(v);
    }
    Ok(out)
}

/// Zero-variance channels map to zeros.
fn zscore_channels(values: &[[f64; CHANNELS]]) -> Vec<[f64; CHANNELS]> {
    let n = values.len() as f64;
    let mut out = values.to_vec();
    for c in 0..CHANNELS {
        let mean = values.iter().map(|v| v[c]).sum::<f64>() / n;
        let var = values.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let degenerate = std <= 1e-9 * mean.abs().max(1.0);
        for row in out.iter_mut() {
            row[c] = if degenerate { 0.0 } else { (row[c] - mean) / std };
        }
    }
    out
}

/// Per-timestep Euclidean norm over all six channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyProfile {
    pub energy: Vec<f64>,
}

pub fn compute_energy(w: &ImuWindow) -> EnergyProfile {
    let energy = w
        .samples
        .iter()
        .map(|s| s.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt())
        .collect();
    EnergyProfile { energy }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionThreshold {
    /// mean + 1 std of the absolute lagged differences over unpadded steps.
    Adaptive,
    Fixed(f64),
}

impl Serialize for MotionThreshold {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            MotionThreshold::Adaptive => s.serialize_str("ADAPTIVE"),
            MotionThreshold::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for MotionThreshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Number(f64),
            Token(String),
        }
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(MotionThreshold::Fixed(v)),
            Repr::Token(t) if t.eq_ignore_ascii_case("adaptive") => Ok(MotionThreshold::Adaptive),
            Repr::Token(t) => Err(de::Error::custom(format!(
                "motion_thresh must be a number or \"ADAPTIVE\", got {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NucleusConfig {
    pub delta_t: usize,
    pub motion_thresh: MotionThreshold,
    pub min_gap: usize,
    pub min_region: usize,
}

impl Default for NucleusConfig {
    fn default() -> Self {
        Self {
            delta_t: 1,
            motion_thresh: MotionThreshold::Adaptive,
            min_gap: 4,
            min_region: 2,
        }
    }
}

impl NucleusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.delta_t < 1 {
            return Err(Error::InvalidConfig("delta_t must be >= 1".into()));
        }
        if self.min_region < 1 {
            return Err(Error::InvalidConfig("min_region must be >= 1".into()));
        }
        if let MotionThreshold::Fixed(v) = self.motion_thresh {
            if !(v >= 0.0) {
                return Err(Error::InvalidConfig(format!("motion_thresh {v}")));
            }
        }
        Ok(())
    }
}

/// Half-open nucleus regions and the per-timestep membership they imply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NucleusMask {
    pub in_nucleus: Vec<bool>,
    pub regions: Vec<(usize, usize)>,
}

impl NucleusMask {
    pub fn empty(len: usize) -> Self {
        Self {
            in_nucleus: vec![false; len],
            regions: Vec::new(),
        }
    }

    pub fn from_regions(len: usize, regions: Vec<(usize, usize)>) -> Self {
        let mut in_nucleus = vec![false; len];
        for &(s, e) in &regions {
            in_nucleus[s..e].iter_mut().for_each(|v| *v = true);
        }
        Self {
            in_nucleus,
            regions,
        }
    }

    pub fn size(&self) -> usize {
        self.in_nucleus.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Threshold on the lagged energy difference, merged into regions.
pub fn detect_nucleus(
    e: &EnergyProfile,
    cfg: &NucleusConfig,
    pad_mask: &[bool],
) -> Result<NucleusMask> {
    cfg.validate()?;
    let len = e.energy.len();
    if pad_mask.len() != len {
        return Err(Error::InvalidInput(format!(
            "energy length {len} vs pad mask {}",
            pad_mask.len()
        )));
    }
    if pad_mask.iter().all(|&p| p) {
        return Err(Error::EmptySignal);
    }
    let diffs: Vec<(usize, f64)> = (0..len.saturating_sub(cfg.delta_t))
        .filter(|&t| !pad_mask[t] && !pad_mask[t + cfg.delta_t])
        .map(|t| (t, (e.energy[t + cfg.delta_t] - e.energy[t]).abs()))
        .collect();
    if diffs.is_empty() {
        return Ok(NucleusMask::empty(len));
    }
    let thresh = match cfg.motion_thresh {
        MotionThreshold::Fixed(v) => v,
        MotionThreshold::Adaptive => {
            let n = diffs.len() as f64;
            let mean = diffs.iter().map(|d| d.1).sum::<f64>() / n;
            let var = diffs.iter().map(|d| (d.1 - mean).powi(2)).sum::<f64>() / n;
            mean + var.sqrt()
        }
    };
    let candidates: Vec<usize> = diffs
        .iter()
        .filter(|(_, d)| *d > thresh)
        .map(|(t, _)| *t)
        .collect();

    let mut regions = Vec::new();
    let mut iter = candidates.into_iter();
    if let Some(first) = iter.next() {
        let (mut start, mut last) = (first, first);
        for c in iter {
            let padded_between = pad_mask[last + 1..c].iter().any(|&p| p);
            if c - last <= cfg.min_gap && !padded_between {
                last = c;
            } else {
                regions.push((start, last + 1));
                start = c;
                last = c;
            }
        }
        regions.push((start, last + 1));
    }
    regions.retain(|&(s, e)| e - s >= cfg.min_region);
    Ok(NucleusMask::from_regions(len, regions))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificantAxis {
    /// Gyroscope axis: 0 = x, 1 = y, 2 = z.
    pub axis_index: usize,
    pub cumulative_rotation: [f64; 3],
}

/// Gyro axis with the largest summed absolute rate over the nucleus, or over
/// every unpadded step when the nucleus is empty. Ties go to the lower index.
pub fn significant_axis(w: &ImuWindow, n: &NucleusMask) -> SignificantAxis {
    let use_nucleus = n.in_nucleus.iter().any(|&v| v);
    let mut cumulative_rotation = [0.0f64; 3];
    for (t, s) in w.samples.iter().enumerate() {
        let included = if use_nucleus {
            n.in_nucleus[t] && !w.pad_mask[t]
        } else {
            !w.pad_mask[t]
        };
        if included {
            for (acc, &g) in cumulative_rotation.iter_mut().zip(&s[3..6]) {
                *acc += f64::from(g).abs();
            }
        }
    }
    let mut axis_index = 0;
    for i in 1..3 {
        if cumulative_rotation[i] > cumulative_rotation[axis_index] {
            axis_index = i;
        }
    }
    SignificantAxis {
        axis_index,
        cumulative_rotation,
    }
}

/// Nucleus and significant axis of a window under `cfg`.
pub fn analyze(w: &ImuWindow, cfg: &NucleusConfig) -> Result<(NucleusMask, SignificantAxis)> {
    let nucleus = detect_nucleus(&compute_energy(w), cfg, w.pad_mask())?;
    let axis = significant_axis(w, &nucleus);
    Ok((nucleus, axis))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stream(n: usize, rate: f64, f: impl Fn(usize) -> [f64; 6]) -> Vec<RawSample> {
        (0..n)
            .map(|i| RawSample {
                t: i as f64 / rate,
                values: f(i),
            })
            .collect()
    }

    fn random_window(seed: u64, len: usize, pad: usize) -> ImuWindow {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = vec![[0.0f32; 6]; len];
        let mut pad_mask = vec![false; len];
        for t in 0..len {
            if t < pad || t >= len - pad {
                pad_mask[t] = true;
            } else {
                samples[t] = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
            }
        }
        ImuWindow::new(samples, pad_mask).unwrap()
    }

    fn energy_of(values: &[f64]) -> EnergyProfile {
        EnergyProfile {
            energy: values.to_vec(),
        }
    }

    #[test]
    fn constant_stream_normalizes_to_zero() {
        let raw = stream(240, 40.0, |_| [0.3, -9.81, 1.0, 0.01, 0.0, 2.5]);
        let w = preprocess(&raw, WINDOW_LEN).unwrap();
        assert_eq!(w.len(), 120);
        assert_eq!(w.valid_count(), 120);
        assert!(w.samples().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn short_stream_is_padded_symmetrically() {
        let raw = stream(60, 20.0, |i| [i as f64, 0.0, 0.0, 0.0, 0.0, (i % 3) as f64]);
        let w = preprocess(&raw, WINDOW_LEN).unwrap();
        assert_eq!(w.valid_count(), 60);
        for t in 0..120 {
            let padded = t < 30 || t >= 90;
            assert_eq!(w.is_padded(t), padded, "t={t}");
            if padded {
                assert_eq!(w.samples()[t], [0.0; 6]);
            }
        }
    }

    #[test]
    fn hundred_hz_recording_resamples_to_26_steps() {
        let f = |t: f64| [t.sin(), 2.0 * t, t * t, (3.0 * t).cos(), 0.5, -t];
        let raw: Vec<RawSample> = (0..130)
            .map(|i| {
                let t = i as f64 / 100.0;
                RawSample { t, values: f(t) }
            })
            .collect();
        let resampled = resample_linear(&raw, 20.0).unwrap();
        assert_eq!(resampled.len(), 26);
        // every 20 Hz grid point lands exactly on a 100 Hz sample
        for (k, v) in resampled.iter().enumerate() {
            let src = &raw[5 * k];
            for c in 0..6 {
                assert!((v[c] - src.values[c]).abs() < 1e-12, "k={k} c={c}");
            }
        }
        let w = preprocess(&raw, WINDOW_LEN).unwrap();
        assert_eq!(w.valid_count(), 26);
        assert!(w.pad_mask()[..47].iter().all(|&p| p));
        assert!(w.pad_mask()[73..].iter().all(|&p| p));
    }

    #[test]
    fn resampler_interpolates_between_samples() {
        // 30 Hz input: grid points fall between source samples.
        let raw = stream(31, 30.0, |i| {
            let t = i as f64 / 30.0;
            [3.0 * t + 1.0, -t, 0.0, 0.0, 0.0, 0.0]
        });
        let out = resample_linear(&raw, 20.0).unwrap();
        assert_eq!(out.len(), 21);
        for (k, v) in out.iter().enumerate() {
            let t = k as f64 / 20.0;
            assert!((v[0] - (3.0 * t + 1.0)).abs() < 1e-12);
            assert!((v[1] + t).abs() < 1e-12);
        }
    }

    #[test]
    fn long_stream_is_center_cropped() {
        let raw = stream(200, 20.0, |i| [i as f64, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let cfg = PreprocessConfig {
            normalize: false,
            ..PreprocessConfig::default()
        };
        let w = preprocess_with(&raw, &cfg).unwrap();
        assert_eq!(w.valid_count(), 120);
        assert_eq!(w.samples()[0][0], 40.0);
        assert_eq!(w.samples()[119][0], 159.0);
    }

    #[test]
    fn rejects_bad_streams() {
        assert!(matches!(preprocess(&[], 120), Err(Error::InvalidInput(_))));
        let mut raw = stream(5, 20.0, |_| [0.0; 6]);
        raw[3].t = raw[2].t;
        assert!(matches!(preprocess(&raw, 120), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zscore_uses_unpadded_statistics() {
        let raw = stream(40, 20.0, |i| [i as f64, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let w = preprocess(&raw, 120).unwrap();
        let vals: Vec<f64> = w
            .samples()
            .iter()
            .zip(w.pad_mask())
            .filter(|(_, &p)| !p)
            .map(|(s, _)| f64::from(s[0]))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn energy_examples() {
        let w = ImuWindow::zeros(120);
        assert!(compute_energy(&w).energy.iter().all(|&e| e == 0.0));

        let mut w = ImuWindow::zeros(120);
        w.set_sample(7, [3.0, 0.0, 0.0, 4.0, 0.0, 0.0]);
        let e = compute_energy(&w);
        assert_eq!(e.energy[7], 5.0);
        assert_eq!(e.energy.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn energy_matches_scalar_loop() {
        for seed in 0..20 {
            let w = random_window(seed, 120, (seed % 4) as usize * 5);
            let e = compute_energy(&w);
            for t in 0..120 {
                let s = w.samples()[t];
                let mut acc = 0.0f64;
                for i in 0..3 {
                    acc += f64::from(s[i]) * f64::from(s[i]) + f64::from(s[i + 3]) * f64::from(s[i + 3]);
                }
                assert!((e.energy[t] - acc.sqrt()).abs() <= 1e-12 * acc.sqrt().max(1.0));
            }
        }
    }

    #[test]
    fn constant_energy_has_no_nucleus() {
        let e = energy_of(&[2.0; 120]);
        let n = detect_nucleus(&e, &NucleusConfig::default(), &[false; 120]).unwrap();
        assert!(n.is_empty());
        assert_eq!(n.size(), 0);
    }

    #[test]
    fn step_profile_merges_into_one_region() {
        let mut v = vec![0.0; 20];
        v[2] = 5.0;
        v[3] = 5.0;
        let cfg = NucleusConfig {
            delta_t: 1,
            motion_thresh: MotionThreshold::Fixed(1.0),
            min_gap: 2,
            min_region: 1,
        };
        let n = detect_nucleus(&energy_of(&v), &cfg, &[false; 20]).unwrap();
        assert_eq!(n.regions, vec![(1, 4)]);
        assert_eq!(&n.in_nucleus[..5], &[false, true, true, true, false]);
    }

    #[test]
    fn candidates_farther_than_min_gap_split() {
        let mut v = vec![0.0; 30];
        v[2] = 5.0;
        v[20] = 5.0;
        let cfg = NucleusConfig {
            delta_t: 1,
            motion_thresh: MotionThreshold::Fixed(1.0),
            min_gap: 2,
            min_region: 1,
        };
        let n = detect_nucleus(&energy_of(&v), &cfg, &[false; 30]).unwrap();
        assert_eq!(n.regions, vec![(1, 3), (19, 21)]);
        let strict = NucleusConfig { min_region: 3, ..cfg };
        assert!(detect_nucleus(&energy_of(&v), &strict, &[false; 30])
            .unwrap()
            .is_empty());
    }

    #[test]
    fn gaussian_bump_yields_single_region_around_center() {
        // full width at half maximum of 10 samples
        let sigma = 10.0 / (2.0 * (2.0 * std::f64::consts::LN_2).sqrt());
        let v: Vec<f64> = (0..120)
            .map(|t| (-((t as f64 - 60.0) / sigma).powi(2) / 2.0).exp() * 4.0)
            .collect();
        let n = detect_nucleus(&energy_of(&v), &NucleusConfig::default(), &[false; 120]).unwrap();
        // brute-force enumeration of candidates under the adaptive threshold
        let d: Vec<f64> = (0..119).map(|t| (v[t + 1] - v[t]).abs()).collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
        let cands: Vec<usize> = (0..119).filter(|&t| d[t] > mean + sd).collect();
        assert_eq!(n.regions.len(), 1, "{:?}", n.regions);
        let (s, e) = n.regions[0];
        assert!(s <= 60 && 60 < e);
        assert_eq!(s, cands[0]);
        assert_eq!(e, cands[cands.len() - 1] + 1);
    }

    #[test]
    fn fully_padded_window_is_empty_signal() {
        let e = energy_of(&[0.0; 10]);
        assert!(matches!(
            detect_nucleus(&e, &NucleusConfig::default(), &[true; 10]),
            Err(Error::EmptySignal)
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let e = energy_of(&[0.0; 10]);
        let cfg = NucleusConfig {
            delta_t: 0,
            ..NucleusConfig::default()
        };
        assert!(matches!(
            detect_nucleus(&e, &cfg, &[false; 10]),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn significant_axis_examples() {
        let mut w = ImuWindow::zeros(20);
        for t in 0..5 {
            w.set_sample(t, [0.0, 0.0, 0.0, 2.0, -0.4, 0.2]);
        }
        let n = NucleusMask::from_regions(20, vec![(0, 5)]);
        let a = significant_axis(&w, &n);
        assert_eq!(a.axis_index, 0);
        assert!((a.cumulative_rotation[0] - 10.0).abs() < 1e-6);
        assert!((a.cumulative_rotation[1] - 2.0).abs() < 1e-6);
        assert!((a.cumulative_rotation[2] - 1.0).abs() < 1e-6);

        let zero = significant_axis(&ImuWindow::zeros(20), &NucleusMask::empty(20));
        assert_eq!(zero.axis_index, 0);
    }

    #[test]
    fn significant_axis_falls_back_to_whole_window() {
        let mut w = ImuWindow::zeros(10);
        w.set_sample(8, [0.0, 0.0, 0.0, 0.0, 0.0, -3.0]);
        assert_eq!(significant_axis(&w, &NucleusMask::empty(10)).axis_index, 2);
    }

    #[test]
    fn threshold_serde_accepts_token_and_number() {
        let cfg: NucleusConfig = serde_json::from_str(
            r#"{"delta_t":1,"motion_thresh":"ADAPTIVE","min_gap":4,"min_region":2}"#,
        )
        .unwrap();
        assert_eq!(cfg, NucleusConfig::default());
        let fixed: MotionThreshold = serde_json::from_str("0.25").unwrap();
        assert_eq!(fixed, MotionThreshold::Fixed(0.25));
        assert_eq!(serde_json::to_string(&MotionThreshold::Adaptive).unwrap(), "\"ADAPTIVE\"");
        assert!(serde_json::from_str::<MotionThreshold>("\"sometimes\"").is_err());
    }

    proptest! {
        #[test]
        fn energy_is_channel_permutation_invariant(seed in 0u64..1000, perm_seed in 0u64..1000) {
            let w = random_window(seed, 40, 3);
            let mut order: Vec<usize> = (0..6).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..6).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let permuted: Vec<Sample> = w.samples().iter().map(|s| std::array::from_fn(|c| s[order[c]])).collect();
            let pw = ImuWindow::new(permuted, w.pad_mask().to_vec()).unwrap();
            let (a, b) = (compute_energy(&w), compute_energy(&pw));
            for (x, y) in a.energy.iter().zip(&b.energy) {
                prop_assert!((x - y).abs() <= 1e-12 * x.max(1.0));
            }
        }

        #[test]
        fn nucleus_never_touches_padding(seed in 0u64..1000, pad in 0usize..30) {
            let w = random_window(seed, 120, pad);
            let (n, _) = analyze(&w, &NucleusConfig::default()).unwrap();
            for t in 0..120 {
                prop_assert!(!(n.in_nucleus[t] && w.is_padded(t)));
            }
            let mut prev_end = 0;
            for &(s, e) in &n.regions {
                prop_assert!(s >= prev_end && e > s && e - s >= 2);
                prev_end = e;
            }
        }

        #[test]
        fn adaptive_nucleus_is_scale_invariant(seed in 0u64..1000, exp in -3i32..4) {
            let w = random_window(seed, 120, 10);
            let factor = 2f32.powi(exp);
            let cfg = NucleusConfig::default();
            let base = compute_energy(&w);
            let scaled = compute_energy(&w.scaled(factor));
            for (a, b) in base.energy.iter().zip(&scaled.energy) {
                prop_assert!((a * f64::from(factor) - b).abs() <= 1e-9 * b.max(1.0));
            }
            let n1 = detect_nucleus(&base, &cfg, w.pad_mask()).unwrap();
            let n2 = detect_nucleus(&scaled, &cfg, w.pad_mask()).unwrap();
            prop_assert_eq!(n1, n2);
        }

        #[test]
        fn axis_ignores_gyro_sign_flips(seed in 0u64..1000, flips in 0u8..8) {
            let w = random_window(seed, 60, 5);
            let n = detect_nucleus(&compute_energy(&w), &NucleusConfig::default(), w.pad_mask()).unwrap();
            let flipped: Vec<Sample> = w.samples().iter().map(|s| {
                let mut s = *s;
                for i in 0..3 {
                    if flips & (1 << i) != 0 { s[3 + i] = -s[3 + i]; }
                }
                s
            }).collect();
            let fw = ImuWindow::new(flipped, w.pad_mask().to_vec()).unwrap();
            prop_assert_eq!(significant_axis(&w, &n), significant_axis(&fw, &n));
        }
    }
}
