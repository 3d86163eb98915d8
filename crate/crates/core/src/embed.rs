//! Segment-level embedding tables and their binary file format.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "VIDEMB\0\0"
//! version    u32
//! dim        u32
//! rows       u64
//! labels     u8       1 when every row carries a singer id
//! config     u32 length + UTF-8 JSON
//! payload    rows * dim f32
//! ```
//!
//! A JSON-lines sidecar index maps each row to its clip id, segment index
//! and singer id.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::CANONICAL_SAMPLE_RATE;
use crate::dsp::canonical_extractor;
use crate::metrics::{EmbeddingRow, EmbeddingTable};
use crate::model::{Model, ModelError};
use crate::pairs::{segment_samples, LoadedClip, Split};

pub const EMBEDDING_MAGIC: [u8; 8] = *b"VIDEMB\0\0";
pub const EMBEDDING_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("clip {0} is not at the canonical sample rate")]
    WrongRate(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EmbedError + '_ {
    move |source| EmbedError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Embeds every clip as consecutive non-overlapping segments of
/// `segment_seconds`; the remainder is dropped. Returns the table and the ids
/// of clips shorter than one segment, which are skipped.
pub fn embed_clips(
    model: &Model<f32>,
    clips: &[LoadedClip],
    segment_seconds: f64,
) -> Result<(EmbeddingTable, Vec<String>), EmbedError> {
    let seg = segment_samples(segment_seconds, CANONICAL_SAMPLE_RATE);
    let mut jobs = Vec::new();
    let mut skipped = Vec::new();
    for (ci, c) in clips.iter().enumerate() {
        if c.clip.sample_rate_hz() != CANONICAL_SAMPLE_RATE {
            return Err(EmbedError::WrongRate(c.id.clone()));
        }
        let n = if seg == 0 { 0 } else { c.clip.len() / seg };
        if n == 0 {
            log::warn!("skipping {}: shorter than {segment_seconds} s", c.id);
            skipped.push(c.id.clone());
        }
        jobs.extend((0..n).map(|s| (ci, s)));
    }
    let rows: Vec<EmbeddingRow> = jobs
        .par_iter()
        .map(|&(ci, s)| {
            let c = &clips[ci];
            let x = &c.clip.samples()[s * seg..(s + 1) * seg];
            let mel = canonical_extractor().compute_samples(x).map_err(ModelError::from)?;
            let e = model.forward_mel(&mel)?;
            Ok(EmbeddingRow {
                clip_id: c.id.clone(),
                segment: s,
                singer_id: c.singer_id.clone(),
                vector: e.h,
            })
        })
        .collect::<Result<_, EmbedError>>()?;
    Ok((EmbeddingTable::new(model.spec.encoder.embedding_dim(), rows), skipped))
}

/// Mean over dimensions of the per-dimension standard deviation.
pub fn mean_dimension_std(vectors: &[Vec<f32>]) -> f64 {
    let n = vectors.len();
    if n < 2 {
        return 0.0;
    }
    let dim = vectors[0].len();
    let mut total = 0.0;
    for d in 0..dim {
        let mean = vectors.iter().map(|v| f64::from(v[d])).sum::<f64>() / n as f64;
        let var = vectors.iter().map(|v| (f64::from(v[d]) - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        total += var.sqrt();
    }
    total / dim as f64
}

/// One line of the sidecar index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub row: usize,
    pub clip_id: String,
    pub segment: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub singer_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Sidecar path: the embedding path with `.index.jsonl` appended.
pub fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".index.jsonl");
    PathBuf::from(s)
}

/// An embedding table with the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub table: EmbeddingTable,
    pub config_json: String,
    pub splits: Vec<Option<Split>>,
}

impl EmbeddingFile {
    pub fn new(table: EmbeddingTable, config_json: String) -> Self {
        let splits = vec![None; table.len()];
        Self {
            table,
            config_json,
            splits,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.table;
        let mut out = Vec::with_capacity(32 + self.config_json.len() + 4 * t.dim * t.len());
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(t.dim as u32).to_le_bytes());
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        out.push(u8::from(t.has_labels()));
        out.extend_from_slice(&(self.config_json.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        for r in &t.rows {
            assert_eq!(r.vector.len(), t.dim, "row width disagrees with header");
            for v in &r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn index_jsonl(&self) -> String {
        let mut s = String::new();
        for (i, r) in self.table.rows.iter().enumerate() {
            let e = IndexEntry {
                row: i,
                clip_id: r.clip_id.clone(),
                segment: r.segment,
                singer_id: r.singer_id.clone(),
                split: self.splits.get(i).copied().flatten(),
            };
            s.push_str(&serde_json::to_string(&e).expect("index entries serialize"));
            s.push('\n');
        }
        s
    }

    /// Writes the binary file and its sidecar index.
    pub fn save(&self, path: &Path) -> Result<(), EmbedError> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))?;
        let idx = index_path(path);
        fs::write(&idx, self.index_jsonl()).map_err(io_err(&idx))
    }

    pub fn load(path: &Path) -> Result<Self, EmbedError> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(path))?;
        let idx = index_path(path);
        let file = fs::File::open(&idx).map_err(io_err(&idx))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&idx))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: IndexEntry = serde_json::from_str(&line)
                .map_err(|e| EmbedError::Format(format!("index line {}: {e}", n + 1)))?;
            entries.push(e);
        }
        Self::from_parts(&bytes, entries)
    }

    pub fn from_parts(bytes: &[u8], index: Vec<IndexEntry>) -> Result<Self, EmbedError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != EMBEDDING_MAGIC {
            return Err(EmbedError::Format("bad magic".into()));
        }
        let version = cur.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(EmbedError::Format(format!("unsupported version {version}")));
        }
        let dim = cur.u32()? as usize;
        let rows = cur.u64()? as usize;
        let labeled = cur.take(1)?[0] == 1;
        let cfg_len = cur.u32()? as usize;
        let config_json = String::from_utf8(cur.take(cfg_len)?.to_vec())
            .map_err(|_| EmbedError::Format("config block is not UTF-8".into()))?;
        let payload = cur.rest();
        if payload.len() != rows * dim * 4 {
            return Err(EmbedError::Format(format!(
                "payload has {} bytes, header implies {}",
                payload.len(),
                rows * dim * 4
            )));
        }
        if index.len() != rows {
            return Err(EmbedError::Format(format!("index has {} rows, header {rows}", index.len())));
        }
        let mut out_rows = Vec::with_capacity(rows);
        let mut splits = Vec::with_capacity(rows);
        for (i, e) in index.into_iter().enumerate() {
            if e.row != i {
                return Err(EmbedError::Format(format!("index row {} out of order", e.row)));
            }
            if labeled && e.singer_id.is_none() {
                return Err(EmbedError::Format(format!("row {i} lacks a singer id")));
            }
            let vector = payload[i * dim * 4..(i + 1) * dim * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            splits.push(e.split);
            out_rows.push(EmbeddingRow {
                clip_id: e.clip_id,
                segment: e.segment,
                singer_id: e.singer_id,
                vector,
            });
        }
        Ok(Self {
            table: EmbeddingTable::new(dim, out_rows),
            config_json,
            splits,
        })
    }

    /// CSV with columns `clip_id,segment,singer_id,e0,e1,...`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EmbedError> {
        let f = fs::File::create(path).map_err(io_err(path))?;
        let mut w = BufWriter::new(f);
        let mut header = String::from("clip_id,segment,singer_id");
        for d in 0..self.table.dim {
            header.push_str(&format!(",e{d}"));
        }
        writeln!(w, "{header}").map_err(io_err(path))?;
        for r in &self.table.rows {
            let mut line = format!(
                "{},{},{}",
                csv_field(&r.clip_id),
                r.segment,
                csv_field(r.singer_id.as_deref().unwrap_or(""))
            );
            for v in &r.vector {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(io_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8], EmbedError> {
        if self.bytes.len() - self.pos < n {
            return Err(EmbedError::Format("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, EmbedError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn u64(&mut self) -> Result<u64, EmbedError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}
