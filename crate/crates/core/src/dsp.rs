//! Short-time Fourier transform and log-compressed mel features.
//!
//! Frames start every `hop` samples and are never padded: an `N`-sample clip
//! yields `floor((N - window) / hop) + 1` frames. Each frame is weighted by a
//! periodic Hann window before the FFT. Mel energies use the HTK mel scale
//! and the power spectrum, and are compressed with `ln(energy + 1e-10)`.

use std::sync::{Arc, OnceLock};

use realfft::num_complex::Complex;
use realfft::{RealFftPlanner, RealToComplex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, CANONICAL_SAMPLE_RATE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DspError {
    #[error("clip has {len} samples, need at least one window of {window}")]
    InsufficientInput { len: usize, window: usize },
    #[error("window and hop must be positive")]
    InvalidFraming,
    #[error("invalid mel frequency range: f_min={f_min} f_max={f_max} (sample rate {sample_rate})")]
    InvalidFrequencyRange {
        f_min: f64,
        f_max: f64,
        sample_rate: u32,
    },
    #[error("mel filter {0} covers no FFT bin; use fewer mel bins or a longer FFT")]
    EmptyFilter(usize),
    #[error("clip sample rate {got} Hz does not match the feature configuration ({expected} Hz)")]
    SampleRateMismatch { got: u32, expected: u32 },
}

/// Complex STFT, `n_bins = window / 2 + 1` rows by `n_frames` columns.
#[derive(Debug, Clone)]
pub struct Spectrogram {
    n_bins: usize,
    n_frames: usize,
    /// frame-major
    data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn get(&self, bin: usize, frame: usize) -> Complex<f64> {
        self.data[frame * self.n_bins + bin]
    }

    pub fn frame(&self, frame: usize) -> &[Complex<f64>] {
        &self.data[frame * self.n_bins..(frame + 1) * self.n_bins]
    }
}

pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    if len < window {
        0
    } else {
        (len - window) / hop + 1
    }
}

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

struct FramePlan {
    window: Vec<f64>,
    fft: Arc<dyn RealToComplex<f64>>,
}

impl FramePlan {
    fn new(window: usize) -> Self {
        Self {
            window: hann_window(window),
            fft: RealFftPlanner::new().plan_fft_forward(window),
        }
    }

    fn check(&self, len: usize, hop: usize) -> Result<usize, DspError> {
        let window = self.window.len();
        if hop == 0 || window == 0 {
            return Err(DspError::InvalidFraming);
        }
        if len < window {
            return Err(DspError::InsufficientInput { len, window });
        }
        Ok(frame_count(len, window, hop))
    }

    /// Calls `f(frame_index, spectrum)` for every frame; the spectrum holds
    /// the `window / 2 + 1` non-negative frequency bins.
    fn for_each_frame(&self, x: &[f32], hop: usize, mut f: impl FnMut(usize, &[Complex<f64>])) {
        let window = self.window.len();
        let n_frames = frame_count(x.len(), window, hop);
        let mut buf = self.fft.make_input_vec();
        let mut spec = self.fft.make_output_vec();
        let mut scratch = self.fft.make_scratch_vec();
        for t in 0..n_frames {
            let frame = &x[t * hop..t * hop + window];
            for ((b, &s), &w) in buf.iter_mut().zip(frame).zip(&self.window) {
                *b = f64::from(s) * w;
            }
            self.fft
                .process_with_scratch(&mut buf, &mut spec, &mut scratch)
                .expect("buffers come from the plan");
            f(t, &spec);
        }
    }
}

pub fn stft(clip: &AudioClip, window: usize, hop: usize) -> Result<Spectrogram, DspError> {
    if window == 0 || hop == 0 {
        return Err(DspError::InvalidFraming);
    }
    let plan = FramePlan::new(window);
    let n_frames = plan.check(clip.len(), hop)?;
    let n_bins = window / 2 + 1;
    let mut data = Vec::with_capacity(n_frames * n_bins);
    plan.for_each_frame(clip.samples(), hop, |_, spec| data.extend_from_slice(&spec[..n_bins]));
    Ok(Spectrogram {
        n_bins,
        n_frames,
        data,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale, stored densely with each row's
/// nonzero support range.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    n_mels: usize,
    n_bins: usize,
    weights: Vec<f64>,
    support: Vec<(usize, usize)>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(
        n_fft: usize,
        n_mels: usize,
        sample_rate_hz: u32,
        f_min: f64,
        f_max: f64,
    ) -> Result<Self, DspError> {
        let nyquist = f64::from(sample_rate_hz) / 2.0;
        if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) || n_mels == 0 || n_fft == 0 {
            return Err(DspError::InvalidFrequencyRange {
                f_min,
                f_max,
                sample_rate: sample_rate_hz,
            });
        }
        let n_bins = n_fft / 2 + 1;
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz = f64::from(sample_rate_hz) / n_fft as f64;

        let mut weights = vec![0.0; n_mels * n_bins];
        let mut support = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let row = &mut weights[m * n_bins..(m + 1) * n_bins];
            let mut first = None;
            let mut last = 0;
            for (k, w) in row.iter_mut().enumerate() {
                let f = k as f64 * bin_hz;
                let v = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                if v > 0.0 {
                    *w = v;
                    first.get_or_insert(k);
                    last = k;
                }
            }
            let first = first.ok_or(DspError::EmptyFilter(m))?;
            support.push((first, last + 1));
        }
        Ok(Self {
            n_mels,
            n_bins,
            weights,
            support,
            centers_hz: edges[1..=n_mels].to_vec(),
        })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }

    /// Half-open bin range where row `m` is nonzero.
    pub fn support(&self, m: usize) -> (usize, usize) {
        self.support[m]
    }

    pub fn center_hz(&self, m: usize) -> f64 {
        self.centers_hz[m]
    }

    /// Mel energies of one power spectrum (`n_bins` values).
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate().take(self.n_mels) {
            let (a, b) = self.support[m];
            *o = self.row(m)[a..b]
                .iter()
                .zip(&power[a..b])
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}

pub fn mel_filterbank(
    n_fft: usize,
    n_mels: usize,
    sample_rate_hz: u32,
    f_min: f64,
    f_max: f64,
) -> Result<MelFilterbank, DspError> {
    MelFilterbank::new(n_fft, n_mels, sample_rate_hz, f_min, f_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate_hz: u32,
    pub window: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: CANONICAL_SAMPLE_RATE,
            window: 2048,
            hop: 512,
            n_mels: 80,
            f_min: 0.0,
            f_max: f64::from(CANONICAL_SAMPLE_RATE) / 2.0,
            log_floor: 1e-10,
        }
    }
}

/// `n_mels x n_frames` log-mel energies, stored mel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    n_mels: usize,
    n_frames: usize,
    values: Vec<f32>,
    pub frame_hop_samples: usize,
    pub window_samples: usize,
}

impl MelSpectrogram {
    pub fn from_values(n_mels: usize, n_frames: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), n_mels * n_frames);
        Self {
            n_mels,
            n_frames,
            values,
            frame_hop_samples: 512,
            window_samples: 2048,
        }
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f32 {
        self.values[mel * self.n_frames + frame]
    }

    pub fn band(&self, mel: usize) -> &[f32] {
        &self.values[mel * self.n_frames..(mel + 1) * self.n_frames]
    }
}

/// Reusable log-mel front end (FFT plan, window and filterbank built once).
pub struct MelExtractor {
    cfg: MelConfig,
    plan: FramePlan,
    filterbank: MelFilterbank,
}

impl MelExtractor {
    pub fn new(cfg: MelConfig) -> Result<Self, DspError> {
        if cfg.window == 0 || cfg.hop == 0 {
            return Err(DspError::InvalidFraming);
        }
        let filterbank = MelFilterbank::new(cfg.window, cfg.n_mels, cfg.sample_rate_hz, cfg.f_min, cfg.f_max)?;
        Ok(Self {
            plan: FramePlan::new(cfg.window),
            filterbank,
            cfg,
        })
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram, DspError> {
        if clip.sample_rate_hz() != self.cfg.sample_rate_hz {
            return Err(DspError::SampleRateMismatch {
                got: clip.sample_rate_hz(),
                expected: self.cfg.sample_rate_hz,
            });
        }
        self.compute_samples(clip.samples())
    }

    /// As [`Self::compute`] for raw samples assumed to be at the configured rate.
    pub fn compute_samples(&self, x: &[f32]) -> Result<MelSpectrogram, DspError> {
        let n_frames = self.plan.check(x.len(), self.cfg.hop)?;
        let n_mels = self.cfg.n_mels;
        let n_bins = self.filterbank.n_bins();
        let mut values = vec![0f32; n_mels * n_frames];
        let mut power = vec![0.0; n_bins];
        let mut energies = vec![0.0; n_mels];
        self.plan.for_each_frame(x, self.cfg.hop, |t, spec| {
            for (p, c) in power.iter_mut().zip(spec) {
                *p = c.norm_sqr();
            }
            self.filterbank.apply(&power, &mut energies);
            for (m, e) in energies.iter().enumerate() {
                values[m * n_frames + t] = (e + self.cfg.log_floor).ln() as f32;
            }
        });
        Ok(MelSpectrogram {
            n_mels,
            n_frames,
            values,
            frame_hop_samples: self.cfg.hop,
            window_samples: self.cfg.window,
        })
    }
}

/// Shared extractor for the canonical configuration.
pub fn canonical_extractor() -> &'static MelExtractor {
    static EXTRACTOR: OnceLock<MelExtractor> = OnceLock::new();
    EXTRACTOR.get_or_init(|| MelExtractor::new(MelConfig::default()).expect("canonical mel config is valid"))
}

/// Canonical 80-bin log-mel features (2048-sample window, 512-sample hop).
pub fn log_mel(clip: &AudioClip) -> Result<MelSpectrogram, DspError> {
    canonical_extractor().compute(clip)
}
