//! Mono waveforms and PCM WAV input/output.

use std::path::Path;

use thiserror::Error;

pub const CANONICAL_SAMPLE_RATE: u32 = 44_100;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("sample {index} = {value} is outside [-1, 1]")]
    OutOfRange { index: usize, value: f32 },
    #[error("{path}: {source}")]
    Wav {
        path: String,
        #[source]
        source: hound::Error,
    },
    #[error("{path}: unsupported sample format ({bits}-bit {format:?}); expected 16-bit int or 32-bit float")]
    UnsupportedFormat {
        path: String,
        bits: u16,
        format: hound::SampleFormat,
    },
    #[error("{path}: {channels} channels; enable down-mixing to accept non-mono input")]
    NotMono { path: String, channels: u16 },
    #[error("{path}: sample rate {rate} Hz; enable resampling to convert to {expected} Hz")]
    WrongRate { path: String, rate: u32, expected: u32 },
}

/// A mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        if sample_rate_hz == 0 {
            return Err(AudioError::InvalidSampleRate);
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.abs() <= 1.0))
        {
            return Err(AudioError::OutOfRange { index, value });
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    /// Builds a clip after clamping every sample into `[-1, 1]` (NaN becomes 0).
    pub fn from_clamped(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self, AudioError> {
        let samples = samples
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) })
            .collect();
        Self::new(samples, sample_rate_hz)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }
}

/// How to treat input that is not mono at the canonical rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    pub downmix: bool,
    pub resample: bool,
}

/// Reads a 16-bit integer or 32-bit float PCM WAV file.
pub fn read_wav(path: &Path, opts: LoadOptions) -> Result<AudioClip, AudioError> {
    let name = path.display().to_string();
    let wrap = |source| AudioError::Wav {
        path: name.clone(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wrap)?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f32::from(v) / 32768.0))
            .collect::<Result<_, _>>()
            .map_err(wrap)?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(wrap)?,
        (format, bits) => {
            return Err(AudioError::UnsupportedFormat {
                path: name,
                bits,
                format,
            })
        }
    };

    let channels = usize::from(spec.channels);
    let mono = if channels == 1 {
        interleaved
    } else if opts.downmix {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    } else {
        return Err(AudioError::NotMono {
            path: name,
            channels: spec.channels,
        });
    };

    let (samples, rate) = if spec.sample_rate == CANONICAL_SAMPLE_RATE {
        (mono, spec.sample_rate)
    } else if opts.resample {
        (
            resample_linear(&mono, spec.sample_rate, CANONICAL_SAMPLE_RATE),
            CANONICAL_SAMPLE_RATE,
        )
    } else {
        return Err(AudioError::WrongRate {
            path: name,
            rate: spec.sample_rate,
            expected: CANONICAL_SAMPLE_RATE,
        });
    };
    AudioClip::from_clamped(samples, rate)
}

/// Writes a clip as mono 16-bit PCM.
pub fn write_wav_16bit(path: &Path, clip: &AudioClip) -> Result<(), AudioError> {
    let name = path.display().to_string();
    let wrap = |source| AudioError::Wav {
        path: name.clone(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in clip.samples() {
        writer.write_sample(quantize_i16(s)).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Inverse of the `v / 32768` read mapping, so 16-bit data round-trips exactly.
pub fn quantize_i16(s: f32) -> i16 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Linear-interpolation sample-rate conversion.
pub fn resample_linear(x: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    if x.is_empty() || from_hz == to_hz {
        return x.to_vec();
    }
    let ratio = f64::from(from_hz) / f64::from(to_hz);
    let out_len = ((x.len() as f64) / ratio).floor().max(1.0) as usize;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let k = pos.floor() as usize;
            let frac = (pos - k as f64) as f32;
            let a = x[k.min(x.len() - 1)];
            let b = x[(k + 1).min(x.len() - 1)];
            a + frac * (b - a)
        })
        .collect()
}
