//! Synthetic singer corpus.
//!
//! Each singer has a fixed vocal-tract-like spectral envelope (four resonances
//! plus a spectral tilt), a pitch register and a vibrato style. Clips are
//! sung note sequences: harmonic tones whose partial amplitudes follow the
//! singer's envelope at the current pitch, with per-clip melodies, dynamics
//! and breath noise.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use vocalid_core::audio::{write_wav_16bit, AudioClip, CANONICAL_SAMPLE_RATE};
use vocalid_core::pairs::{DatasetManifest, ManifestEntry, Split};
use vocalid_core::rng::{self, Rng};

use crate::error::{data, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub singers: usize,
    pub clips_per_singer: usize,
    pub seconds: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            singers: 32,
            clips_per_singer: 8,
            seconds: 6.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.singers < 3 || self.clips_per_singer == 0 || !(self.seconds > 0.1) {
            return Err(CliError::Config(
                "synth needs at least 3 singers, 1 clip and a positive duration".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub register_hz: f64,
    /// (center Hz, bandwidth Hz, linear gain)
    pub formants: [(f64, f64, f64); 4],
    pub tilt_db_per_octave: f64,
    pub vibrato_hz: f64,
    pub vibrato_depth: f64,
    pub breath: f64,
}

impl Voice {
    pub fn draw(rng: &mut Rng) -> Self {
        let ranges = [(250.0, 900.0), (900.0, 2400.0), (2200.0, 3400.0), (3300.0, 4800.0)];
        let mut formants = [(0.0, 0.0, 0.0); 4];
        for (f, &(lo, hi)) in formants.iter_mut().zip(&ranges) {
            *f = (
                rng.gen_range(lo..hi),
                rng.gen_range(60.0..220.0),
                10f64.powf(rng.gen_range(-12.0..0.0) / 20.0),
            );
        }
        Self {
            register_hz: 110.0 * 2f64.powf(rng.gen_range(0.0..2.0)),
            formants,
            tilt_db_per_octave: rng.gen_range(-9.0..-3.0),
            vibrato_hz: rng.gen_range(4.5..6.5),
            vibrato_depth: rng.gen_range(0.005..0.03),
            breath: rng.gen_range(0.0..0.08),
        }
    }

    /// Linear amplitude of a partial at `hz`.
    pub fn envelope(&self, hz: f64) -> f64 {
        let resonances: f64 = self
            .formants
            .iter()
            .map(|&(fc, bw, g)| g / (1.0 + ((hz - fc) / (0.5 * bw)).powi(2)))
            .sum();
        let tilt = 10f64.powf(self.tilt_db_per_octave * (hz / 100.0).max(1.0).log2() / 20.0);
        (resonances + 0.01) * tilt
    }
}

const BLOCK: usize = 32;
const MAX_PARTIAL_HZ: f64 = 10_000.0;

/// Renders one clip of `seconds` at the canonical rate.
pub fn render_clip(voice: &Voice, seconds: f64, rng: &mut Rng) -> Vec<f32> {
    let sr = f64::from(CANONICAL_SAMPLE_RATE);
    let n = (seconds * sr).round() as usize;

    // melody: notes on a scale around the register, with slides between them
    let scale = [0, 2, 4, 5, 7, 9, 11, 12];
    let key = rng.gen_range(-3i32..=3);
    let mut notes = Vec::new();
    let mut t = 0usize;
    while t < n {
        let len = (rng.gen_range(0.3..1.0) * sr) as usize;
        let degree = scale[rng.gen_range(0..scale.len())] + key;
        let level = rng.gen_range(0.5..1.0);
        notes.push((t, len, voice.register_hz * 2f64.powf(f64::from(degree) / 12.0), level));
        t += len;
    }
    let vib_phase = rng.gen_range(0.0..2.0 * PI);
    let loudness = rng.gen_range(0.35..0.8);

    let mut out = vec![0.0f64; n];
    let mut theta = 0.0f64;
    let mut log_f0 = notes[0].2.ln();
    let mut amps: Vec<f64> = Vec::new();
    let mut note = 0usize;
    let mut breath_state = 0.0f64;
    for start in (0..n).step_by(BLOCK) {
        while note + 1 < notes.len() && start >= notes[note + 1].0 {
            note += 1;
        }
        let (n_start, n_len, target, level) = notes[note];
        // portamento toward the note pitch
        log_f0 += 0.08 * (target.ln() - log_f0);
        let time = start as f64 / sr;
        let f0 = log_f0.exp() * (1.0 + voice.vibrato_depth * (2.0 * PI * voice.vibrato_hz * time + vib_phase).sin());
        let pos = (start - n_start) as f64 / sr;
        let remain = (n_start + n_len).saturating_sub(start) as f64 / sr;
        let gate = (pos / 0.04).min(1.0) * (remain / 0.06).min(1.0) * level;

        let partials = ((MAX_PARTIAL_HZ / f0) as usize).max(1);
        amps.clear();
        amps.extend((1..=partials).map(|h| voice.envelope(h as f64 * f0)));
        let dtheta = 2.0 * PI * f0 / sr;
        for x in out.iter_mut().skip(start).take(BLOCK) {
            theta = (theta + dtheta) % (2.0 * PI);
            // sin(h * theta) by the Chebyshev recurrence
            let (s1, c1) = theta.sin_cos();
            let (mut prev, mut cur) = (0.0, s1);
            let mut acc = 0.0;
            for &a in &amps {
                acc += a * cur;
                let next = 2.0 * c1 * cur - prev;
                prev = cur;
                cur = next;
            }
            let white: f64 = StandardNormal.sample(rng);
            breath_state += 0.3 * (white - breath_state);
            *x = gate * (acc + voice.breath * breath_state);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    out.iter().map(|v| (v / peak * loudness) as f32).collect()
}

/// Singer-disjoint 80/10/10 split of `n` singers; val and test get at least
/// one singer each.
pub fn split_singers(n: usize, rng: &mut Rng) -> Vec<Split> {
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    let test = val;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut splits = vec![Split::Train; n];
    for (rank, &s) in order.iter().enumerate() {
        if rank < val {
            splits[s] = Split::Val;
        } else if rank < val + test {
            splits[s] = Split::Test;
        }
    }
    splits
}

pub fn singer_name(s: usize) -> String {
    format!("singer_{s:02}")
}

/// Writes the corpus WAVs under `out_dir` and returns the manifest (saved as
/// `manifest.jsonl`).
pub fn synthesize(cfg: &SynthConfig, seed: u64, out_dir: &Path) -> Result<DatasetManifest, CliError> {
    cfg.validate()?;
    let splits = split_singers(cfg.singers, &mut rng::stream(seed, "synth-split", &[]));
    let mut entries = Vec::new();
    for (s, split) in splits.iter().enumerate() {
        let voice = Voice::draw(&mut rng::stream(seed, "synth-voice", &[s as u64]));
        let dir = out_dir.join(singer_name(s));
        fs::create_dir_all(&dir).map_err(data)?;
        for c in 0..cfg.clips_per_singer {
            let samples = render_clip(&voice, cfg.seconds, &mut rng::stream(seed, "synth-clip", &[s as u64, c as u64]));
            let rel = format!("{}/clip_{c:02}.wav", singer_name(s));
            let clip = AudioClip::from_clamped(samples, CANONICAL_SAMPLE_RATE).map_err(data)?;
            write_wav_16bit(&out_dir.join(&rel), &clip).map_err(data)?;
            entries.push(ManifestEntry {
                path: rel,
                singer_id: Some(singer_name(s)),
                split: *split,
            });
        }
    }
    let manifest = DatasetManifest::new(entries, out_dir).map_err(data)?;
    manifest.save(&out_dir.join("manifest.jsonl")).map_err(data)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_singer_disjoint_and_sized() {
        let s = split_singers(32, &mut rng::seeded(1));
        let count = |x: Split| s.iter().filter(|&&v| v == x).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (26, 3, 3));
        assert_eq!(s, split_singers(32, &mut rng::seeded(1)));
    }

    #[test]
    fn clips_are_bounded_and_deterministic() {
        let v = Voice::draw(&mut rng::seeded(2));
        let a = render_clip(&v, 0.5, &mut rng::seeded(3));
        let b = render_clip(&v, 0.5, &mut rng::seeded(3));
        assert_eq!(a, b);
        assert_eq!(a.len(), 22050);
        let peak = a.iter().fold(0.0f32, |m, x| m.max(x.abs()));
        assert!(peak > 0.3 && peak <= 0.8);
    }
}
