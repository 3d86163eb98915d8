//! Waveform-domain augmentation.
//!
//! Four augmentations are applied, each independently with probability
//! `p_apply`, always in the order gain, pitch shift, Gaussian noise, time
//! mask. Pitch shifting is delegated to a [`PitchShifter`] so that external
//! formant-preserving engines can be attached; the built-in default is the
//! identity.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::CANONICAL_SAMPLE_RATE;
use crate::dsp::hann_window;
use crate::rng::Rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
    #[error("pitch shifter failed: {0}")]
    PitchShift(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub p_apply: f64,
    pub gain_min_db: f64,
    pub gain_max_db: f64,
    pub time_mask_max_fraction: f64,
    pub noise_snr_range_db: (f64, f64),
    pub pitch_shift_ratio_range: (f64, f64),
    pub pitch_range_ratio_range: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            p_apply: 0.5,
            gain_min_db: -6.0,
            gain_max_db: 0.0,
            time_mask_max_fraction: 1.0 / 8.0,
            noise_snr_range_db: (10.0, 40.0),
            pitch_shift_ratio_range: (1.0, 3.0),
            pitch_range_ratio_range: (1.0, 1.5),
        }
    }
}

impl AugmentationConfig {
    /// Configuration that never augments.
    pub fn disabled() -> Self {
        Self {
            p_apply: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.p_apply) {
            return bad("p_apply must be in [0, 1]");
        }
        if !(self.gain_min_db <= self.gain_max_db) {
            return bad("gain_min_db must not exceed gain_max_db");
        }
        if !(self.time_mask_max_fraction > 0.0 && self.time_mask_max_fraction <= 1.0) {
            return bad("time_mask_max_fraction must be in (0, 1]");
        }
        let (lo, hi) = self.noise_snr_range_db;
        if !(lo <= hi) {
            return bad("noise SNR range is empty");
        }
        for (name, (lo, hi)) in [
            ("pitch shift ratio", self.pitch_shift_ratio_range),
            ("pitch range ratio", self.pitch_range_ratio_range),
        ] {
            if !(lo > 0.0 && lo <= hi) {
                return Err(AugmentError::InvalidConfig(format!("{name} range must be positive and ordered")));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn clamp_unit(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
}

/// Scales by `10^(gain_db / 20)` and clamps to `[-1, 1]`.
pub fn apply_gain(x: &[f32], gain_db: f64) -> Vec<f32> {
    let g = 10f64.powf(gain_db / 20.0);
    let mut out: Vec<f32> = x.iter().map(|&s| (f64::from(s) * g) as f32).collect();
    clamp_unit(&mut out);
    out
}

/// Adds white Gaussian noise at the requested signal-to-noise ratio. An
/// all-zero input has no defined SNR and is returned unchanged.
pub fn add_gaussian_noise(x: &[f32], snr_db: f64, rng: &mut Rng) -> Vec<f32> {
    let power = x.iter().map(|&s| f64::from(s).powi(2)).sum::<f64>() / x.len().max(1) as f64;
    if power == 0.0 {
        return x.to_vec();
    }
    let noise_std = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, noise_std).expect("finite std");
    let mut out: Vec<f32> = x
        .iter()
        .map(|&s| (f64::from(s) + normal.sample(rng)) as f32)
        .collect();
    clamp_unit(&mut out);
    out
}

/// Zeroes `[start, start + len)` of `x`.
pub fn mask_region(x: &[f32], start: usize, len: usize) -> Vec<f32> {
    let mut out = x.to_vec();
    let end = (start + len).min(out.len());
    out[start.min(end)..end].iter_mut().for_each(|v| *v = 0.0);
    out
}

/// Draws a mask length uniformly from `0..=floor(len * max_fraction)` and a
/// uniform offset. Returns `(start, mask_len)`.
pub fn sample_time_mask(len: usize, max_fraction: f64, rng: &mut Rng) -> (usize, usize) {
    let max_len = ((len as f64) * max_fraction).floor() as usize;
    let mask_len = rng.gen_range(0..=max_len.min(len));
    let start = rng.gen_range(0..=len - mask_len);
    (start, mask_len)
}

/// One random contiguous mask of at most `max_fraction` of the clip.
pub fn time_mask(x: &[f32], max_fraction: f64, rng: &mut Rng) -> Vec<f32> {
    let (start, len) = sample_time_mask(x.len(), max_fraction, rng);
    mask_region(x, start, len)
}

/// Draws `(shift_ratio, range_ratio)` uniformly from the configured ranges,
/// then with probability 1/2 takes the reciprocal of both.
pub fn sample_pitch_ratios(cfg: &AugmentationConfig, rng: &mut Rng) -> (f64, f64) {
    let shift = uniform(rng, cfg.pitch_shift_ratio_range);
    let range = uniform(rng, cfg.pitch_range_ratio_range);
    if rng.gen_bool(0.5) {
        (1.0 / shift, 1.0 / range)
    } else {
        (shift, range)
    }
}

/// Pitch-shift engine attached to the augmentation pipeline.
///
/// Implementations must return a waveform of the same length and sample rate,
/// and should keep the spectral envelope (formants) in place.
pub trait PitchShifter: Send + Sync {
    fn shift(
        &self,
        x: &[f32],
        sample_rate_hz: u32,
        shift_ratio: f64,
        range_ratio: f64,
    ) -> Result<Vec<f32>, AugmentError>;

    fn name(&self) -> &str;
}

/// Returns its input unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityPitchShifter;

impl PitchShifter for IdentityPitchShifter {
    fn shift(&self, x: &[f32], _: u32, shift_ratio: f64, range_ratio: f64) -> Result<Vec<f32>, AugmentError> {
        if !(shift_ratio > 0.0 && range_ratio > 0.0) {
            return Err(AugmentError::PitchShift("ratios must be positive".into()));
        }
        Ok(x.to_vec())
    }

    fn name(&self) -> &str {
        "identity"
    }
}

/// Granular resampling shifter: each Hann grain is read back at `shift_ratio`
/// times the original rate around its own center and overlap-added in place.
///
/// Duration is preserved, but the spectral envelope moves with the pitch, so
/// this engine is opt-in. The range ratio is ignored (no contour control).
#[derive(Debug, Clone)]
pub struct GranularPitchShifter {
    pub grain: usize,
    pub hop: usize,
}

impl Default for GranularPitchShifter {
    fn default() -> Self {
        Self { grain: 2048, hop: 512 }
    }
}

impl PitchShifter for GranularPitchShifter {
    fn shift(&self, x: &[f32], _: u32, shift_ratio: f64, range_ratio: f64) -> Result<Vec<f32>, AugmentError> {
        if !(shift_ratio > 0.0 && range_ratio > 0.0) {
            return Err(AugmentError::PitchShift("ratios must be positive".into()));
        }
        if self.grain == 0 || self.hop == 0 {
            return Err(AugmentError::PitchShift("grain and hop must be positive".into()));
        }
        let n = x.len();
        let window = hann_window(self.grain);
        let half = (self.grain / 2) as isize;
        let read = |pos: f64| -> f64 {
            if pos < 0.0 {
                return 0.0;
            }
            let k = pos.floor() as usize;
            if k + 1 >= n {
                return if k < n { f64::from(x[k]) } else { 0.0 };
            }
            let frac = pos - k as f64;
            f64::from(x[k]) * (1.0 - frac) + f64::from(x[k + 1]) * frac
        };
        let mut acc = vec![0.0f64; n];
        let mut weight = vec![0.0f64; n];
        let mut start = -half;
        while start < n as isize {
            let center = (start + half) as f64;
            for (j, &w) in window.iter().enumerate() {
                let t = start + j as isize;
                if t < 0 || t >= n as isize {
                    continue;
                }
                let offset = j as f64 - half as f64;
                acc[t as usize] += w * read(center + offset * shift_ratio);
                weight[t as usize] += w;
            }
            start += self.hop as isize;
        }
        Ok(acc
            .iter()
            .zip(&weight)
            .map(|(&a, &w)| if w > 1e-9 { (a / w).clamp(-1.0, 1.0) as f32 } else { 0.0 })
            .collect())
    }

    fn name(&self) -> &str {
        "granular-resampling"
    }
}

/// Augmentation pipeline bound to a pitch-shift engine.
#[derive(Clone)]
pub struct Augmenter {
    cfg: AugmentationConfig,
    pitch: Arc<dyn PitchShifter>,
    sample_rate_hz: u32,
}

impl std::fmt::Debug for Augmenter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Augmenter")
            .field("cfg", &self.cfg)
            .field("pitch", &self.pitch.name())
            .finish()
    }
}

impl Augmenter {
    pub fn new(cfg: AugmentationConfig) -> Result<Self, AugmentError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            pitch: Arc::new(IdentityPitchShifter),
            sample_rate_hz: CANONICAL_SAMPLE_RATE,
        })
    }

    pub fn with_pitch_shifter(mut self, pitch: Arc<dyn PitchShifter>) -> Self {
        self.pitch = pitch;
        self
    }

    pub fn config(&self) -> &AugmentationConfig {
        &self.cfg
    }

    /// Applies the pipeline. Output length equals input length and every
    /// sample stays in `[-1, 1]`.
    pub fn apply(&self, x: &[f32], rng: &mut Rng) -> Vec<f32> {
        let cfg = &self.cfg;
        let mut y = x.to_vec();

        if rng.gen::<f64>() < cfg.p_apply {
            let gain = uniform(rng, (cfg.gain_min_db, cfg.gain_max_db));
            y = apply_gain(&y, gain);
        }
        if rng.gen::<f64>() < cfg.p_apply {
            let (shift, range) = sample_pitch_ratios(cfg, rng);
            match self.pitch.shift(&y, self.sample_rate_hz, shift, range) {
                Ok(mut shifted) if shifted.len() == y.len() => {
                    clamp_unit(&mut shifted);
                    y = shifted;
                }
                Ok(shifted) => log::warn!(
                    "pitch shifter {} changed length {} -> {}; skipped",
                    self.pitch.name(),
                    y.len(),
                    shifted.len()
                ),
                Err(e) => log::warn!("pitch shift skipped: {e}"),
            }
        }
        if rng.gen::<f64>() < cfg.p_apply {
            let snr = uniform(rng, cfg.noise_snr_range_db);
            y = add_gaussian_noise(&y, snr, rng);
        }
        if rng.gen::<f64>() < cfg.p_apply && !y.is_empty() {
            y = time_mask(&y, cfg.time_mask_max_fraction, rng);
        }
        y
    }
}

/// Applies the pipeline with the identity pitch shifter.
pub fn augment(x: &[f32], cfg: &AugmentationConfig, rng: &mut Rng) -> Result<Vec<f32>, AugmentError> {
    Ok(Augmenter::new(cfg.clone())?.apply(x, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn rms(x: &[f32]) -> f64 {
        (x.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn noise_signal(n: usize, seed: u64, amp: f32) -> Vec<f32> {
        let mut rng = seeded(seed);
        (0..n).map(|_| rng.gen_range(-amp..amp)).collect()
    }

    #[test]
    fn gain_cases() {
        let x = noise_signal(1000, 1, 0.5);
        assert_eq!(apply_gain(&x, 0.0), x);
        let y = apply_gain(&vec![0.5; 10], -6.0);
        let expected = 0.5 * 10f64.powf(-0.3);
        assert!(y.iter().all(|&v| (f64::from(v) - expected).abs() < 1e-6));
        assert!((expected - 0.2506).abs() < 1e-4);
        let y = apply_gain(&x, -3.0);
        assert!((rms(&y) / rms(&x) - 10f64.powf(-3.0 / 20.0)).abs() < 1e-6);
        assert!(apply_gain(&[0.9], 6.0)[0] == 1.0);
    }

    #[test]
    fn noise_cases() {
        let x = noise_signal(10_000, 2, 0.5);
        let y = add_gaussian_noise(&x, 120.0, &mut seeded(3));
        let diff: Vec<f32> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        assert!(rms(&diff) < 1e-4);

        assert_eq!(add_gaussian_noise(&[0.0; 16], 10.0, &mut seeded(4)), vec![0.0; 16]);

        // unit-RMS sine at 0 dB SNR; no clamping by scaling down afterwards
        let n = 4 * 44_100;
        let amp = 0.5f64;
        let sine: Vec<f32> = (0..n)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * 220.0 * i as f64 / 44_100.0).sin()) as f32)
            .collect();
        let noisy = add_gaussian_noise(&sine, 0.0, &mut seeded(5));
        let residual: Vec<f32> = noisy.iter().zip(&sine).map(|(a, b)| a - b).collect();
        // expected noise RMS equals signal RMS at 0 dB; clamping at 1 trims a few samples only
        let ratio = rms(&residual) / rms(&sine);
        assert!((ratio - 1.0).abs() < 0.05, "{ratio}");

        let a = add_gaussian_noise(&x, 20.0, &mut seeded(9));
        let b = add_gaussian_noise(&x, 20.0, &mut seeded(9));
        assert_eq!(a, b);
    }

    #[test]
    fn time_mask_bounds() {
        let x = vec![0.5f32; 80_000];
        for seed in 0..50 {
            let y = time_mask(&x, 0.125, &mut seeded(seed));
            let zeros = y.iter().filter(|&&v| v == 0.0).count();
            assert!(zeros <= 10_000);
            let runs = y.windows(2).filter(|w| w[0] != 0.0 && w[1] == 0.0).count()
                + usize::from(y[0] == 0.0);
            assert!(runs <= 1);
            assert_eq!(runs == 1, zeros > 0);
        }
        assert_eq!(mask_region(&x[..10], 3, 0), x[..10].to_vec());
    }

    #[test]
    fn time_mask_length_distribution() {
        let len = 8000;
        let (mut max_seen, mut total) = (0usize, 0usize);
        for seed in 0..1000 {
            let (_, l) = sample_time_mask(len, 0.125, &mut seeded(seed));
            max_seen = max_seen.max(l);
            total += l;
        }
        let mean = total as f64 / 1000.0;
        assert!(max_seen <= len / 8);
        assert!((mean / (len as f64 / 16.0) - 1.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn pitch_ratio_sampling_is_log_symmetric() {
        let cfg = AugmentationConfig::default();
        let mut rng = seeded(11);
        let mut logs: Vec<f64> = (0..10_000).map(|_| sample_pitch_ratios(&cfg, &mut rng).0.ln()).collect();
        logs.sort_by(f64::total_cmp);
        let median = 0.5 * (logs[4999] + logs[5000]);
        assert!(median.abs() < 0.05, "{median}");
        assert!(logs.iter().all(|l| l.abs() <= 3f64.ln() + 1e-12));
    }

    #[test]
    fn pitch_shifters() {
        let x = noise_signal(5000, 12, 0.3);
        assert_eq!(IdentityPitchShifter.shift(&x, 44_100, 1.7, 1.2).unwrap(), x);
        let g = GranularPitchShifter::default();
        let same = g.shift(&x, 44_100, 1.0, 1.0).unwrap();
        assert_eq!(same.len(), x.len());
        for (a, b) in same.iter().zip(&x) {
            assert!((a - b).abs() < 1e-5);
        }
        let up = g.shift(&x, 44_100, 2.0, 1.0).unwrap();
        assert_eq!(up.len(), x.len());
        assert!(g.shift(&x, 44_100, -1.0, 1.0).is_err());
    }

    #[test]
    fn failing_hook_is_skipped() {
        struct Broken;
        impl PitchShifter for Broken {
            fn shift(&self, _: &[f32], _: u32, _: f64, _: f64) -> Result<Vec<f32>, AugmentError> {
                Err(AugmentError::PitchShift("boom".into()))
            }
            fn name(&self) -> &str {
                "broken"
            }
        }
        let cfg = AugmentationConfig {
            p_apply: 1.0,
            gain_min_db: 0.0,
            gain_max_db: 0.0,
            time_mask_max_fraction: 1e-9,
            noise_snr_range_db: (200.0, 200.0),
            ..Default::default()
        };
        let aug = Augmenter::new(cfg).unwrap().with_pitch_shifter(Arc::new(Broken));
        let x = noise_signal(1000, 13, 0.5);
        let y = aug.apply(&x, &mut seeded(1));
        assert_eq!(y.len(), x.len());
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn augment_identity_cases() {
        let x = noise_signal(4000, 14, 0.8);
        let off = AugmentationConfig::disabled();
        assert_eq!(augment(&x, &off, &mut seeded(1)).unwrap(), x);

        let noop = AugmentationConfig {
            p_apply: 1.0,
            gain_min_db: 0.0,
            gain_max_db: 0.0,
            time_mask_max_fraction: 1e-9,
            noise_snr_range_db: (100.0, 100.0),
            ..Default::default()
        };
        let y = augment(&x, &noop, &mut seeded(2)).unwrap();
        let diff: Vec<f32> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
        assert!(rms(&diff) < 1e-4);
    }

    #[test]
    fn augment_is_deterministic() {
        let x = noise_signal(4000, 15, 0.8);
        let cfg = AugmentationConfig::default();
        for seed in 0..20 {
            assert_eq!(
                augment(&x, &cfg, &mut seeded(seed)).unwrap(),
                augment(&x, &cfg, &mut seeded(seed)).unwrap()
            );
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = AugmentationConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.p_apply = 1.5;
        assert!(cfg.validate().is_err());
        let cfg = AugmentationConfig {
            gain_min_db: 1.0,
            gain_max_db: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentationConfig {
            time_mask_max_fraction: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn augment_preserves_length_and_range(
            len in 8usize..3000,
            seed in any::<u64>(),
            p in 0.0f64..=1.0,
        ) {
            let x = noise_signal(len, seed, 1.0);
            let cfg = AugmentationConfig { p_apply: p, ..Default::default() };
            let aug = Augmenter::new(cfg).unwrap()
                .with_pitch_shifter(Arc::new(GranularPitchShifter { grain: 256, hop: 64 }));
            let y = aug.apply(&x, &mut seeded(seed));
            prop_assert_eq!(y.len(), x.len());
            prop_assert!(y.iter().all(|v| v.abs() <= 1.0));
        }
    }
}
