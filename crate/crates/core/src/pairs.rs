//! Dataset manifests, silence trimming and positive-pair batch construction.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{read_wav, AudioClip, AudioError, LoadOptions};
use crate::augment::Augmenter;
use crate::rng::{self, Rng};

/// Samples below this absolute amplitude are silent.
pub const SILENCE_THRESHOLD: f32 = 0.005;
/// Voiced regions shorter than this are silenced.
pub const MIN_VOICED_SECONDS: f64 = 0.2;
/// Silent gaps shorter than this inside a voiced region (zero crossings,
/// plosives) do not split it.
pub const BRIDGE_SECONDS: f64 = 0.02;
/// Silent runs longer than this are shortened to it.
pub const MAX_SILENCE_SECONDS: f64 = 1.3;

#[derive(Debug, Error)]
pub enum PairsError {
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error("manifest lists {0:?} more than once")]
    DuplicatePath(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("clip has {len} samples, shorter than the {segment}-sample segment")]
    ClipTooShort { len: usize, segment: usize },
    #[error("only {eligible} eligible clips for a batch of {batch}")]
    NotEnoughClips { eligible: usize, batch: usize },
    #[error("batch size and segment length must be positive")]
    InvalidBatching,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub singer_id: Option<String>,
    pub split: Split,
}

/// JSON-lines manifest; relative paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self, PairsError> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.path.as_str()) {
                return Err(PairsError::DuplicatePath(e.path.clone()));
            }
        }
        Ok(Self {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, PairsError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|err| PairsError::ManifestParse {
                line: i + 1,
                message: err.to_string(),
            })?;
            entries.push(e);
        }
        Self::new(entries, base_dir)
    }

    pub fn load(path: &Path) -> Result<Self, PairsError> {
        let io = |source| PairsError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = fs::File::open(path).map_err(io)?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(io)?);
            text.push('\n');
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), PairsError> {
        let io = |source| PairsError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = fs::File::create(path).map_err(io)?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(io)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// A decoded clip with its manifest metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedClip {
    pub id: String,
    pub singer_id: Option<String>,
    pub split: Split,
    pub clip: AudioClip,
}

/// Decodes the manifest entries matching `split` (all entries for `None`).
/// Unreadable files are returned separately instead of failing the load.
pub fn load_clips(
    manifest: &DatasetManifest,
    split: Option<Split>,
    opts: LoadOptions,
) -> (Vec<LoadedClip>, Vec<(String, AudioError)>) {
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| split.map_or(true, |s| e.split == s))
        .collect();
    let decoded: Vec<Result<LoadedClip, (String, AudioError)>> = entries
        .par_iter()
        .map(|e| {
            read_wav(&manifest.resolve(e), opts)
                .map(|clip| LoadedClip {
                    id: e.path.clone(),
                    singer_id: e.singer_id.clone(),
                    split: e.split,
                    clip,
                })
                .map_err(|err| (e.path.clone(), err))
        })
        .collect();
    let mut ok = Vec::new();
    let mut failed = Vec::new();
    for r in decoded {
        match r {
            Ok(c) => ok.push(c),
            Err(f) => failed.push(f),
        }
    }
    (ok, failed)
}

fn runs(flags: &[bool]) -> Vec<(bool, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=flags.len() {
        if i == flags.len() || flags[i] != flags[start] {
            out.push((flags[start], start, i));
            start = i;
        }
    }
    out
}

/// Voiced regions: maximal spans of non-silent samples in which silent gaps
/// shorter than `bridge` samples are bridged. Returned as `[start, end)`.
pub fn voiced_regions(silent: &[bool], bridge: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (is_silent, a, b) in runs(silent) {
        if is_silent {
            continue;
        }
        match out.last_mut() {
            Some(last) if a - last.1 < bridge => last.1 = b,
            _ => out.push((a, b)),
        }
    }
    out
}

/// Silences short voiced bursts, then shortens every silent run longer than
/// 1.3 s to its first 1.3 s.
///
/// A sample is silent when `|x| < 0.005`. Bursts are voiced regions (see
/// [`voiced_regions`], gaps under 20 ms bridged) shorter than 0.2 s. The
/// result is a fixed point of this function.
pub fn trim_silence(clip: &AudioClip) -> AudioClip {
    let rate = f64::from(clip.sample_rate_hz());
    let min_voiced = (MIN_VOICED_SECONDS * rate).round() as usize;
    let max_silence = (MAX_SILENCE_SECONDS * rate).round() as usize;
    let bridge = (BRIDGE_SECONDS * rate).round() as usize;

    let mut x = clip.samples().to_vec();
    let mut silent: Vec<bool> = x.iter().map(|v| v.abs() < SILENCE_THRESHOLD).collect();
    for (a, b) in voiced_regions(&silent, bridge) {
        if b - a < min_voiced {
            x[a..b].iter_mut().for_each(|v| *v = 0.0);
            silent[a..b].iter_mut().for_each(|s| *s = true);
        }
    }

    let mut out = Vec::with_capacity(x.len());
    for (is_silent, a, b) in runs(&silent) {
        let end = if is_silent { b.min(a + max_silence) } else { b };
        out.extend_from_slice(&x[a..end]);
    }
    AudioClip::new(out, clip.sample_rate_hz()).expect("trimming keeps samples in range")
}

pub fn segment_samples(segment_seconds: f64, sample_rate_hz: u32) -> usize {
    (segment_seconds * f64::from(sample_rate_hz)).round() as usize
}

/// Two independent uniform crop offsets for a segment of `segment` samples.
pub fn sample_crop_offsets(len: usize, segment: usize, rng: &mut Rng) -> Result<(usize, usize), PairsError> {
    if segment == 0 {
        return Err(PairsError::InvalidBatching);
    }
    if len < segment {
        return Err(PairsError::ClipTooShort { len, segment });
    }
    let max = len - segment;
    Ok((rng.gen_range(0..=max), rng.gen_range(0..=max)))
}

/// Two random crops of the same clip; they may overlap.
pub fn sample_positive_pair(
    clip: &AudioClip,
    segment_seconds: f64,
    rng: &mut Rng,
) -> Result<(Vec<f32>, Vec<f32>), PairsError> {
    let seg = segment_samples(segment_seconds, clip.sample_rate_hz());
    let (a, b) = sample_crop_offsets(clip.len(), seg, rng)?;
    let x = clip.samples();
    Ok((x[a..a + seg].to_vec(), x[b..b + seg].to_vec()))
}

/// `B` positive pairs from distinct clips.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub view1: Vec<Vec<f32>>,
    pub view2: Vec<Vec<f32>>,
    pub clip_ids: Vec<String>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.clip_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clip_ids.is_empty()
    }
}

/// One epoch of positive-pair batches over a random permutation of the
/// eligible clips. The final partial batch is dropped.
pub struct EpochBatches<'a> {
    clips: Vec<&'a LoadedClip>,
    order: Vec<usize>,
    batch_size: usize,
    segment: usize,
    augmenter: &'a Augmenter,
    seed: u64,
    epoch: u64,
    next: usize,
}

impl<'a> EpochBatches<'a> {
    pub fn num_batches(&self) -> usize {
        self.order.len() / self.batch_size
    }

    /// Manifest ids in the order they will be emitted.
    pub fn clip_order(&self) -> Vec<&str> {
        self.order.iter().map(|&i| self.clips[i].id.as_str()).collect()
    }
}

impl Iterator for EpochBatches<'_> {
    type Item = PairBatch;

    fn next(&mut self) -> Option<PairBatch> {
        if self.next >= self.num_batches() {
            return None;
        }
        let members = &self.order[self.next * self.batch_size..(self.next + 1) * self.batch_size];
        self.next += 1;
        let views: Vec<(Vec<f32>, Vec<f32>)> = members
            .par_iter()
            .map(|&ci| {
                let clip = self.clips[ci];
                let mut r = rng::stream(self.seed, "pair", &[self.epoch, ci as u64]);
                let (a, b) = sample_crop_offsets(clip.clip.len(), self.segment, &mut r)
                    .expect("eligible clips are long enough");
                let x = clip.clip.samples();
                let v1 = self.augmenter.apply(&x[a..a + self.segment], &mut r);
                let v2 = self.augmenter.apply(&x[b..b + self.segment], &mut r);
                (v1, v2)
            })
            .collect();
        let (view1, view2) = views.into_iter().unzip();
        Some(PairBatch {
            view1,
            view2,
            clip_ids: members.iter().map(|&i| self.clips[i].id.clone()).collect(),
        })
    }
}

/// Batches for `epoch`; the permutation and every crop and augmentation
/// depend only on `(seed, epoch, clip index)`.
pub fn epoch_batches<'a>(
    clips: &'a [LoadedClip],
    batch_size: usize,
    segment_seconds: f64,
    augmenter: &'a Augmenter,
    seed: u64,
    epoch: u64,
) -> Result<EpochBatches<'a>, PairsError> {
    if batch_size == 0 || segment_seconds <= 0.0 {
        return Err(PairsError::InvalidBatching);
    }
    let rate = clips.first().map_or(crate::audio::CANONICAL_SAMPLE_RATE, |c| c.clip.sample_rate_hz());
    let segment = segment_samples(segment_seconds, rate);
    let eligible: Vec<&LoadedClip> = clips.iter().filter(|c| c.clip.len() >= segment).collect();
    if eligible.len() < batch_size {
        return Err(PairsError::NotEnoughClips {
            eligible: eligible.len(),
            batch: batch_size,
        });
    }
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.shuffle(&mut rng::stream(seed, "epoch", &[epoch]));
    Ok(EpochBatches {
        clips: eligible,
        order,
        batch_size,
        segment,
        augmenter,
        seed,
        epoch,
        next: 0,
    })
}
